//! Subcommand implementations. Each writes its CSV outputs and a
//! `manifest.json` into the output directory.

use std::path::{Path, PathBuf};

use fbsde_core::brownian::{BrownianLattice, IncrementSet};
use fbsde_core::csv::Table;
use fbsde_core::loss::{loss_scaling_scan, remainder_decomposition, ExactPoint, PointSolution};
use fbsde_core::mlmc::variance_structure_scan;
use fbsde_core::problems::Fbsde;
use fbsde_core::simulate::{generate_paths, GenerateOptions, Track};
use fbsde_core::surrogate::{load_checkpoint, save_checkpoint};
use fbsde_core::train::{
    train_multilevel_inspired_observed, train_single_level_observed, IterationInfo, TrainReport,
};
use fbsde_core::{Mlp, TimeGrid};

use crate::config::{GridChoice, RunConfig, Seeds, TrainMode};
use crate::error::CliError;
use crate::manifest::{sha256_hex, FileDigest, Manifest};

/// Parsed command-line context shared by all subcommands.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config_text: String,
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

impl Invocation {
    pub fn from_file(
        path: &Path,
        seed: Option<u64>,
        out: Option<PathBuf>,
        checkpoints: Vec<PathBuf>,
    ) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_text(text, seed, out, checkpoints)
    }

    pub fn from_text(
        config_text: String,
        seed: Option<u64>,
        out: Option<PathBuf>,
        checkpoints: Vec<PathBuf>,
    ) -> Result<Self, CliError> {
        let config = RunConfig::parse(&config_text)?;
        let out = out
            .or_else(|| config.experiment.out.clone().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Invocation {
            config_text,
            config,
            seed,
            out,
            checkpoints,
        })
    }

    fn seeds(&self) -> Seeds {
        self.config.seeds(self.seed)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        Ok(&self.out)
    }

    fn load_checkpoints(&self) -> Result<Vec<Mlp>, CliError> {
        self.checkpoints.iter().map(|p| Ok(load_checkpoint(p)?)).collect()
    }

    fn finish(
        &self,
        command: &str,
        outputs: &[PathBuf],
        lattice_seed: Option<u64>,
    ) -> Result<Vec<PathBuf>, CliError> {
        let manifest = Manifest {
            tool: "fbsde",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: sha256_hex(self.config_text.as_bytes()),
            config: &self.config,
            seeds: self.seeds(),
            lattice_seed,
            inputs: self
                .checkpoints
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<_, _>>()?,
            outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
        };
        manifest.write(&self.out)?;
        let mut all = outputs.to_vec();
        all.push(self.out.join("manifest.json"));
        Ok(all)
    }
}

fn write_table(table: &Table, path: PathBuf) -> Result<PathBuf, CliError> {
    table.write_to(&path)?;
    Ok(path)
}

fn check_net<P: Fbsde>(problem: &P, net: &Mlp) -> Result<(), CliError> {
    if net.state_dim() != problem.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects d = {}, problem has d = {}",
            net.state_dim(),
            problem.dim()
        )));
    }
    Ok(())
}

/// Trains a fresh network; writes `checkpoint.fbnn`, `checkpoint_<k>.fbnn`
/// for each requested iteration count, `history.csv` and `timing.csv`.
pub fn cmd_train(inv: &Invocation) -> Result<(TrainReport, Vec<PathBuf>), CliError> {
    let cfg = &inv.config;
    let seeds = inv.seeds();
    let problem = cfg.build_problem()?;
    let mut net = cfg.build_network(seeds.network)?;
    let tc = cfg.train_config(seeds.train)?;
    let wanted = &cfg.train.checkpoints;
    if let Some(k) = wanted.iter().find(|k| **k > tc.iterations) {
        return Err(CliError::Config(format!(
            "train.checkpoints: {k} exceeds train.iterations = {}",
            tc.iterations
        )));
    }
    let dir = inv.out_dir()?.to_path_buf();
    let mut snapshots: Vec<(usize, Mlp)> = Vec::new();
    let mut observer = |info: &IterationInfo<'_>| {
        if wanted.contains(&info.iteration) {
            snapshots.push((info.iteration, info.net.clone()));
        }
    };
    let report = match cfg.train.mode {
        TrainMode::Single => train_single_level_observed(&problem, &mut net, &tc, &mut observer)?,
        TrainMode::Multilevel => train_multilevel_inspired_observed(&problem, &mut net, &tc, &mut observer)?,
    };
    if wanted.contains(&tc.iterations) {
        snapshots.push((tc.iterations, net.clone()));
    }
    let mut outputs = Vec::new();
    let final_path = dir.join("checkpoint.fbnn");
    save_checkpoint(&net, &final_path)?;
    outputs.push(final_path);
    snapshots.sort_by_key(|s| s.0);
    snapshots.dedup_by_key(|s| s.0);
    for (k, n) in &snapshots {
        let p = dir.join(format!("checkpoint_{k}.fbnn"));
        save_checkpoint(n, &p)?;
        outputs.push(p);
    }
    outputs.push(write_table(&report.history_table(), dir.join("history.csv"))?);
    let timing = write_table(&report.timing_table(), dir.join("timing.csv"))?;
    let mut written = inv.finish("train", &outputs, Some(report.lattice_seed))?;
    // wall-clock data is kept out of the manifest digests
    written.push(timing);
    Ok((report, written))
}

/// Simulates paths on the configured grid; writes `paths.csv`.
pub fn cmd_paths(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let cfg = &inv.config;
    let seeds = inv.seeds();
    let problem = cfg.build_problem()?;
    let nets = inv.load_checkpoints()?;
    let net = nets.first();
    if let Some(n) = net {
        check_net(&problem, n)?;
    }
    let (mut exact, surrogate) = cfg.tracks()?;
    if surrogate && net.is_none() {
        if !exact {
            return Err(CliError::Config("surrogate track requested without --checkpoint".into()));
        }
        log::warn!("no checkpoint given; writing the exact track only");
    }
    if exact && problem.exact().is_none() {
        if net.is_none() {
            return Err(CliError::Config("problem has no exact solution and no checkpoint was given".into()));
        }
        log::warn!("problem has no exact solution; writing the surrogate track only");
        exact = false;
    }
    let level = cfg.grid.level;
    let m = cfg.experiment.paths;
    let (grid, incs, lattice_seed) = match cfg.grid.kind {
        GridChoice::Uniform => {
            let lat = BrownianLattice::sample(seeds.experiment, level, m, problem.dim(), problem.horizon())?;
            (TimeGrid::uniform(problem.horizon(), 1 << level)?, lat.increments_at_level(level)?, Some(lat.seed()))
        }
        GridChoice::Chebyshev => {
            let grid = TimeGrid::chebyshev(problem.horizon(), 1 << level)?;
            let incs = IncrementSet::sample(&grid, m, problem.dim(), seeds.experiment)?;
            (grid, incs, None)
        }
    };
    let opts = GenerateOptions {
        exact_track: exact,
        surrogate_track: surrogate && net.is_some(),
        ..Default::default()
    };
    let bundle = generate_paths(&problem, &grid, &incs, net, opts)?;
    let dir = inv.out_dir()?;
    let out = write_table(&bundle.to_table(), dir.join("paths.csv"))?;
    inv.finish("paths", &[out], lattice_seed)
}

/// Residual scaling scan with `û := u`; writes `loss_scan.csv`.
pub fn cmd_loss_scan(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let cfg = &inv.config;
    let seeds = inv.seeds();
    let problem = cfg.build_problem()?;
    if problem.exact().is_none() {
        return Err(CliError::Config("loss-scan needs a problem with an exact solution".into()));
    }
    let scan = loss_scaling_scan(
        &problem,
        &cfg.experiment.levels,
        cfg.experiment.paths,
        seeds.experiment,
        cfg.experiment.max_rel_se,
    )?;
    let dir = inv.out_dir()?;
    let out = write_table(&scan.to_table(), dir.join("loss_scan.csv"))?;
    inv.finish("loss-scan", &[out], Some(seeds.experiment))
}

/// Coupled-difference scan on one lattice; the first checkpoint is `θ`, the
/// second `θ'`. Writes `variance_scan.csv`.
pub fn cmd_variance_scan(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let cfg = &inv.config;
    let seeds = inv.seeds();
    let problem = cfg.build_problem()?;
    let nets = inv.load_checkpoints()?;
    for n in &nets {
        check_net(&problem, n)?;
    }
    if nets.len() > 2 {
        log::warn!("only the first two checkpoints are used");
    }
    let levels = &cfg.experiment.levels;
    let top = *levels.iter().max().unwrap();
    let lattice = BrownianLattice::sample(seeds.experiment, top, cfg.experiment.paths, problem.dim(), problem.horizon())?;
    let scan = variance_structure_scan(
        &problem,
        &lattice,
        nets.first(),
        nets.get(1),
        levels,
        &cfg.markers()?,
        cfg.matching()?,
    )?;
    let dir = inv.out_dir()?;
    let out = write_table(&scan.to_table(), dir.join("variance_scan.csv"))?;
    inv.finish("variance-scan", &[out], Some(lattice.seed()))
}

/// Per-step remainder terms along a few paths (d = 1); uses the first
/// checkpoint if given, the exact solution otherwise. Writes
/// `loss_diagnostics.csv`.
pub fn cmd_loss_diagnostics(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let cfg = &inv.config;
    let seeds = inv.seeds();
    let problem = cfg.build_problem()?;
    if problem.dim() != 1 {
        return Err(CliError::Config("loss-diagnostics is defined for problem.dim = 1".into()));
    }
    let nets = inv.load_checkpoints()?;
    let net = nets.first();
    if let Some(n) = net {
        check_net(&problem, n)?;
    }
    let exact_point;
    let (source, track): (&dyn PointSolution, Track) = match net {
        Some(n) => (n, Track::Surrogate),
        None => {
            let u = problem
                .exact()
                .ok_or_else(|| CliError::Config("no checkpoint and no exact solution".into()))?;
            exact_point = ExactPoint(u);
            (&exact_point, Track::Exact)
        }
    };
    let level = cfg.grid.level;
    let m = cfg.experiment.diagnostic_paths.max(1);
    let lat = BrownianLattice::sample(seeds.experiment, level, m, 1, problem.horizon())?;
    let grid = TimeGrid::uniform(problem.horizon(), 1 << level)?;
    let incs = lat.increments_at_level(level)?;
    let opts = GenerateOptions {
        exact_track: track == Track::Exact,
        surrogate_track: track == Track::Surrogate,
        ..Default::default()
    };
    let bundle = generate_paths(&problem, &grid, &incs, net, opts)?;
    let mut table = Table::new(&[
        "path", "step", "t", "dt", "dw", "x", "y", "z", "r1", "r2", "r3", "r4", "r5", "r6", "r_tail", "residual",
    ]);
    for p in 0..m {
        for n in 0..grid.steps() {
            let (t, dt, dw) = (grid.time(n), grid.step(n), incs.get(p, n)[0]);
            let (x, y, z) = (bundle.x(track, p, n)[0], bundle.y(track, p, n), bundle.z(track, p, n)[0]);
            let r = remainder_decomposition(&problem, source, t, x, y, z, dt, dw)?;
            let mut row = vec![p.into(), n.into(), t.into(), dt.into(), dw.into(), x.into(), y.into(), z.into()];
            row.extend(r.r.iter().map(|v| (*v).into()));
            row.push(r.tail.into());
            row.push(r.residual.into());
            table.push(row);
        }
    }
    let dir = inv.out_dir()?;
    let out = write_table(&table, dir.join("loss_diagnostics.csv"))?;
    inv.finish("loss-diagnostics", &[out], Some(lat.seed()))
}

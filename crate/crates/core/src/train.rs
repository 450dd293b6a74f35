//! Training loops: single level, the level-by-level warm-started scheme on
//! one coupled lattice, and independent coarse/fine trainings from a shared
//! prior for telescoped estimators.

use std::sync::Arc;
use std::time::Instant;

use crate::autodiff::Real;
use crate::brownian::{BrownianLattice, IncrementSet};
use crate::csv::Table;
use crate::error::{invalid, shape, Error, Result};
use crate::loss::{training_loss, LossOptions, LossVariant};
use crate::problems::{epsilon_cloud, epsilon_estimate, Fbsde};
use crate::rng::{derive_seed, derive_seed_str};
use crate::simulate::{decoupled_forward_states, generate_paths, ForwardScheme, GenerateOptions};
use crate::surrogate::{AdamConfig, AdamState, Mlp, ParamTape};
use crate::timegrid::{GridKind, TimeGrid};

/// Loss values above this multiple of the first recorded loss abort training.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Paths per batch `M`.
    pub batch: usize,
    /// Level `L`; single-level training uses `N = 2^L` steps.
    pub max_level: u32,
    /// Total optimiser iterations `K`.
    pub iterations: usize,
    pub adam: AdamConfig,
    pub variant: LossVariant,
    pub loss: LossOptions,
    /// Draw a fresh lattice every iteration instead of reusing the first.
    pub resample_paths: bool,
    pub seed: u64,
    pub grid_kind: GridKind,
    /// Size of the quasi-random cloud for `ε̂`; 0 disables the estimate.
    pub epsilon_points: usize,
    /// Half-width of the spatial box of the `ε̂` cloud around `X₀`.
    pub epsilon_halfwidth: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 256,
            max_level: 4,
            iterations: 2000,
            adam: AdamConfig::default(),
            variant: LossVariant::Pathwise,
            loss: LossOptions::default(),
            resample_paths: true,
            seed: 0,
            grid_kind: GridKind::Uniform,
            epsilon_points: 10_000,
            epsilon_halfwidth: 0.5,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.adam.learning_rate > 0.0) || !(self.epsilon_halfwidth > 0.0) {
            return Err(invalid("learning rate and cloud half-width must be positive"));
        }
        if self.max_level > 20 {
            return Err(invalid("max_level above 20 is not supported"));
        }
        Ok(())
    }

    fn lattice_seed(&self) -> u64 {
        derive_seed_str(self.seed, "lattice")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub level: u32,
    /// Loss before the update of this iteration.
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSegment {
    pub level: u32,
    /// First iteration of the segment.
    pub start: usize,
    /// One past the last iteration.
    pub end: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<HistoryEntry>,
    pub segments: Vec<LevelSegment>,
    pub epsilon_initial: Option<f64>,
    pub epsilon_final: Option<f64>,
    /// Seed of the lattice used in fixed-path mode, or of the first lattice.
    pub lattice_seed: u64,
}

impl TrainReport {
    /// `iteration, level, loss`; free of timing so it is reproducible.
    pub fn history_table(&self) -> Table {
        let mut t = Table::new(&["iteration", "level", "loss"]);
        for h in &self.history {
            t.push(vec![h.iteration.into(), (h.level as usize).into(), h.loss.into()]);
        }
        if let (Some(a), Some(b)) = (self.epsilon_initial, self.epsilon_final) {
            t.footer(format!("epsilon_initial: {}", crate::csv::format_float(a)));
            t.footer(format!("epsilon_final: {}", crate::csv::format_float(b)));
        }
        t
    }

    /// `iteration, level, wall_ms`.
    pub fn timing_table(&self) -> Table {
        let mut t = Table::new(&["iteration", "level", "wall_ms"]);
        for h in &self.history {
            t.push(vec![h.iteration.into(), (h.level as usize).into(), h.wall_ms.into()]);
        }
        t
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|h| h.loss)
    }
}

/// State visible to an observer before each update.
pub struct IterationInfo<'a> {
    pub iteration: usize,
    pub level: u32,
    pub loss: f64,
    /// Parameters the loss was evaluated at.
    pub net: &'a Mlp,
    /// Lattice the increments came from (uniform grids only).
    pub lattice: Option<&'a Arc<BrownianLattice>>,
    pub increments: &'a IncrementSet,
}

pub type Observer<'o> = dyn FnMut(&IterationInfo<'_>) + 'o;

struct Batch {
    grid: TimeGrid,
    lattice: Option<Arc<BrownianLattice>>,
    incs: IncrementSet,
    states: Option<Vec<f64>>,
}

impl Batch {
    fn new<P: Fbsde>(problem: &P, cfg: &TrainConfig, level: u32, lattice_level: u32, seed: u64) -> Result<Self> {
        let n = 1usize << level;
        let (grid, lattice, incs) = match cfg.grid_kind {
            GridKind::Uniform => {
                let lat = Arc::new(BrownianLattice::sample(
                    seed,
                    lattice_level,
                    cfg.batch,
                    problem.dim(),
                    problem.horizon(),
                )?);
                let incs = lat.increments_at_level(level)?;
                (TimeGrid::uniform(problem.horizon(), n)?, Some(lat), incs)
            }
            GridKind::Chebyshev => {
                if lattice_level != level {
                    return Err(Error::Unsupported("coupled levels need a uniform dyadic grid".into()));
                }
                let grid = TimeGrid::chebyshev(problem.horizon(), n)?;
                let incs = IncrementSet::sample(&grid, cfg.batch, problem.dim(), seed)?;
                (grid, None, incs)
            }
        };
        let states = if problem.forward_decoupled() {
            Some(decoupled_forward_states(problem, &grid, &incs, ForwardScheme::EulerMaruyama)?)
        } else {
            None
        };
        Ok(Batch {
            grid,
            lattice,
            incs,
            states,
        })
    }

    fn states<P: Fbsde>(&self, problem: &P, net: &Mlp) -> Result<Vec<f64>> {
        match &self.states {
            Some(s) => Ok(s.clone()),
            None => {
                let opts = GenerateOptions {
                    exact_track: false,
                    ..Default::default()
                };
                let b = generate_paths(problem, &self.grid, &self.incs, Some(net), opts)?;
                Ok(b.surrogate.unwrap().x)
            }
        }
    }
}

/// Loss value and parameter gradient at the current parameters.
pub fn loss_and_gradient<P: Fbsde>(
    problem: &P,
    net: &Mlp,
    grid: &TimeGrid,
    incs: &IncrementSet,
    states: &[f64],
    variant: LossVariant,
    options: &LossOptions,
) -> Result<(f64, Vec<f64>)> {
    let pt = ParamTape::new(net);
    let loss = training_loss(&pt, problem, grid, incs, states, variant, options)?;
    let value = loss.value();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    Ok((value, pt.parameter_gradient(loss)?))
}

struct Runner<'a, 'o, P: Fbsde> {
    problem: &'a P,
    cfg: &'a TrainConfig,
    net: &'a mut Mlp,
    history: Vec<HistoryEntry>,
    segments: Vec<LevelSegment>,
    initial_loss: Option<f64>,
    observer: Option<&'a mut Observer<'o>>,
}

impl<P: Fbsde> Runner<'_, '_, P> {
    /// `iterations` updates at `level`; `batch_for(i)` yields the batch of
    /// local iteration `i`.
    fn segment(
        &mut self,
        level: u32,
        iterations: usize,
        mut batch_for: impl FnMut(usize) -> Result<Arc<Batch>>,
    ) -> Result<()> {
        let seg_start = Instant::now();
        let start = self.history.len();
        let mut adam = AdamState::new(self.net.num_params(), self.cfg.adam);
        let mut params = self.net.params_flat();
        for i in 0..iterations {
            let it_start = Instant::now();
            let batch = batch_for(i)?;
            let states = batch.states(self.problem, self.net)?;
            let (loss, grad) = loss_and_gradient(
                self.problem,
                self.net,
                &batch.grid,
                &batch.incs,
                &states,
                self.cfg.variant,
                &self.cfg.loss,
            )?;
            let iteration = self.history.len();
            let initial = *self.initial_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
                log::error!("training diverged at iteration {iteration}: loss {loss}, initial {initial}");
                return Err(Error::Diverged { iteration, loss });
            }
            if let Some(obs) = self.observer.as_mut() {
                obs(&IterationInfo {
                    iteration,
                    level,
                    loss,
                    net: self.net,
                    lattice: batch.lattice.as_ref(),
                    increments: &batch.incs,
                });
            }
            adam.step(&mut params, &grad)?;
            self.net.set_params_flat(&params)?;
            self.history.push(HistoryEntry {
                iteration,
                level,
                loss,
                wall_ms: it_start.elapsed().as_secs_f64() * 1e3,
            });
            if iteration % 500 == 0 {
                log::debug!("iteration {iteration} level {level} loss {loss:.6e}");
            }
        }
        self.segments.push(LevelSegment {
            level,
            start,
            end: self.history.len(),
            wall_ms: seg_start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(())
    }
}

fn epsilon<P: Fbsde>(problem: &P, net: &Mlp, cfg: &TrainConfig) -> Result<Option<f64>> {
    let (Some(u), true) = (problem.exact(), cfg.epsilon_points > 0) else {
        return Ok(None);
    };
    let x0 = problem.initial_state();
    let mean = x0.iter().sum::<f64>() / x0.len() as f64;
    let (t, x) = epsilon_cloud(
        cfg.epsilon_points,
        problem.dim(),
        problem.horizon(),
        mean - cfg.epsilon_halfwidth,
        mean + cfg.epsilon_halfwidth,
    )?;
    Ok(Some(epsilon_estimate(u, net, &t, &x)?))
}

fn check_net<P: Fbsde>(problem: &P, net: &Mlp) -> Result<()> {
    if net.state_dim() != problem.dim() {
        return Err(shape("network input dimension does not match the problem"));
    }
    Ok(())
}

fn single_level_on<P: Fbsde>(
    problem: &P,
    net: &mut Mlp,
    cfg: &TrainConfig,
    lattice_level: u32,
    observer: Option<&mut Observer<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_net(problem, net)?;
    let eps0 = epsilon(problem, net, cfg)?;
    let base = cfg.lattice_seed();
    let level = cfg.max_level;
    let mut fixed: Option<Arc<Batch>> = None;
    let mut runner = Runner {
        problem,
        cfg,
        net,
        history: Vec::new(),
        segments: Vec::new(),
        initial_loss: None,
        observer,
    };
    runner.segment(level, cfg.iterations, |i| {
        if cfg.resample_paths {
            let seed = if i == 0 { base } else { derive_seed(base, i as u64) };
            return Ok(Arc::new(Batch::new(problem, cfg, level, lattice_level, seed)?));
        }
        if fixed.is_none() {
            fixed = Some(Arc::new(Batch::new(problem, cfg, level, lattice_level, base)?));
        }
        Ok(Arc::clone(fixed.as_ref().unwrap()))
    })?;
    let (history, segments) = (runner.history, runner.segments);
    let eps1 = epsilon(problem, net, cfg)?;
    Ok(TrainReport {
        history,
        segments,
        epsilon_initial: eps0,
        epsilon_final: eps1,
        lattice_seed: base,
    })
}

/// `K` Adam iterations at `N = 2^L` steps.
pub fn train_single_level<P: Fbsde>(problem: &P, net: &mut Mlp, cfg: &TrainConfig) -> Result<TrainReport> {
    single_level_on(problem, net, cfg, cfg.max_level, None)
}

pub fn train_single_level_observed<P: Fbsde>(
    problem: &P,
    net: &mut Mlp,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainReport> {
    single_level_on(problem, net, cfg, cfg.max_level, Some(observer))
}

/// Levels `0..=L` on one lattice, `⌊K/(L+1)⌋` iterations each (the
/// remainder goes to level `L`), each warm-started from the previous.
///
/// Paths are fixed per level unless `resample_paths` is set, in which case
/// every iteration draws a fresh lattice at the finest level.
pub fn train_multilevel_inspired<P: Fbsde>(problem: &P, net: &mut Mlp, cfg: &TrainConfig) -> Result<TrainReport> {
    train_multilevel_impl(problem, net, cfg, None)
}

pub fn train_multilevel_inspired_observed<P: Fbsde>(
    problem: &P,
    net: &mut Mlp,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainReport> {
    train_multilevel_impl(problem, net, cfg, Some(observer))
}

fn train_multilevel_impl<P: Fbsde>(
    problem: &P,
    net: &mut Mlp,
    cfg: &TrainConfig,
    observer: Option<&mut Observer<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_net(problem, net)?;
    let levels = cfg.max_level as usize + 1;
    if cfg.iterations < levels {
        return Err(invalid(format!(
            "need at least {levels} iterations for levels 0..={}",
            cfg.max_level
        )));
    }
    if cfg.grid_kind != GridKind::Uniform {
        return Err(Error::Unsupported("level-by-level training needs a uniform grid".into()));
    }
    let eps0 = epsilon(problem, net, cfg)?;
    let base = cfg.lattice_seed();
    let lattice = Arc::new(BrownianLattice::sample(
        base,
        cfg.max_level,
        cfg.batch,
        problem.dim(),
        problem.horizon(),
    )?);
    let per_level = cfg.iterations / levels;
    let mut runner = Runner {
        problem,
        cfg,
        net,
        history: Vec::new(),
        segments: Vec::new(),
        initial_loss: None,
        observer,
    };
    for l in 0..=cfg.max_level {
        let iters = if l == cfg.max_level {
            cfg.iterations - per_level * (levels - 1)
        } else {
            per_level
        };
        let grid = TimeGrid::uniform(problem.horizon(), 1 << l)?;
        let make = |lat: Arc<BrownianLattice>| -> Result<Arc<Batch>> {
            let incs = lat.increments_at_level(l)?;
            let states = if problem.forward_decoupled() {
                Some(decoupled_forward_states(problem, &grid, &incs, ForwardScheme::EulerMaruyama)?)
            } else {
                None
            };
            Ok(Arc::new(Batch {
                grid: grid.clone(),
                lattice: Some(lat),
                incs,
                states,
            }))
        };
        let fixed = make(Arc::clone(&lattice))?;
        let offset = runner.history.len();
        runner.segment(l, iters, |i| {
            if cfg.resample_paths && offset + i > 0 {
                let seed = derive_seed(base, (offset + i) as u64);
                let lat = BrownianLattice::sample(seed, cfg.max_level, cfg.batch, problem.dim(), problem.horizon())?;
                return make(Arc::new(lat));
            }
            Ok(Arc::clone(&fixed))
        })?;
    }
    let (history, segments) = (runner.history, runner.segments);
    let eps1 = epsilon(problem, net, cfg)?;
    Ok(TrainReport {
        history,
        segments,
        epsilon_initial: eps0,
        epsilon_final: eps1,
        lattice_seed: base,
    })
}

/// One coarse/fine pair trained from the shared prior.
#[derive(Debug, Clone)]
pub struct TelescopingReplica {
    pub seed: u64,
    pub coarse: Mlp,
    pub fine: Mlp,
    /// `θ_f − θ_c`, flat.
    pub difference: Vec<f64>,
    pub coarse_report: TrainReport,
    pub fine_report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct TelescopingReport {
    pub replicas: Vec<TelescopingReplica>,
}

/// Sample means of a functional under the split `E[F(θ_c)] + E[F(θ_f) − F(θ_c)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelescopedEstimate {
    pub coarse_mean: f64,
    pub correction_mean: f64,
    pub fine_mean: f64,
}

impl TelescopedEstimate {
    pub fn telescoped(&self) -> f64 {
        self.coarse_mean + self.correction_mean
    }
}

impl TelescopingReport {
    /// Both means are conditioned on the same prior; the coarse result is
    /// never used as the starting point of the fine training.
    pub fn estimate(&self, functional: impl Fn(&Mlp) -> Result<f64>) -> Result<TelescopedEstimate> {
        let r = self.replicas.len() as f64;
        if self.replicas.is_empty() {
            return Err(Error::Insufficient("no replicas".into()));
        }
        let (mut c, mut d, mut f) = (0.0, 0.0, 0.0);
        for rep in &self.replicas {
            let vc = functional(&rep.coarse)?;
            let vf = functional(&rep.fine)?;
            c += vc;
            d += vf - vc;
            f += vf;
        }
        Ok(TelescopedEstimate {
            coarse_mean: c / r,
            correction_mean: d / r,
            fine_mean: f / r,
        })
    }

    pub fn mean_parameters(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let r = self.replicas.len() as f64;
        let n = self.replicas.first().map_or(0, |x| x.difference.len());
        let mut out = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for rep in &self.replicas {
            for (i, (c, f)) in rep.coarse.params_flat().iter().zip(rep.fine.params_flat()).enumerate() {
                out.0[i] += c / r;
                out.1[i] += (f - c) / r;
                out.2[i] += f / r;
            }
        }
        out
    }
}

/// Independent coarse and fine trainings from `prior`, each replica on one
/// lattice sampled at the finer of the two levels.
pub fn train_two_level_telescoping<P: Fbsde>(
    problem: &P,
    prior: &Mlp,
    coarse: &TrainConfig,
    fine: &TrainConfig,
    replicas: usize,
) -> Result<TelescopingReport> {
    check_net(problem, prior)?;
    if coarse.seed != fine.seed || coarse.batch != fine.batch || coarse.grid_kind != fine.grid_kind {
        return Err(Error::Coupling(
            "coarse and fine trainings must share seed, batch size and grid kind".into(),
        ));
    }
    if replicas == 0 {
        return Err(invalid("at least one replica is required"));
    }
    let top = coarse.max_level.max(fine.max_level);
    let mut out = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let seed = derive_seed(coarse.seed, r as u64);
        let run = |cfg: &TrainConfig| -> Result<(Mlp, TrainReport)> {
            let mut c = cfg.clone();
            c.seed = seed;
            let mut net = prior.clone();
            let rep = single_level_on(problem, &mut net, &c, top, None)?;
            Ok((net, rep))
        };
        let (cn, cr) = run(coarse)?;
        let (fnn, fr) = run(fine)?;
        let difference = fnn
            .params_flat()
            .iter()
            .zip(cn.params_flat())
            .map(|(f, c)| f - c)
            .collect();
        out.push(TelescopingReplica {
            seed,
            coarse: cn,
            fine: fnn,
            difference,
            coarse_report: cr,
            fine_report: fr,
        });
    }
    Ok(TelescopingReport { replicas: out })
}

//! Threshold selection by Fisher-information drift, and crossbar capacity
//! alignment of the 8-bit cluster.
//!
//! The threshold is searched in rank space: rank `r ∈ [0, R]` puts the `r`
//! lowest-scoring strips in the 4-bit cluster (`r = R` is maximum
//! compression). Each evaluated rank compresses the model, recomputes the
//! diagonal empirical Fisher information on calibration data and measures
//! its squared distance to the uncompressed model's. The loss is piecewise
//! constant in the threshold, so its slope is a central difference over
//! neighbouring ranks.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CimError, Result};
use crate::quant::{assign_clusters_layered, compress, BitwidthMap};
use crate::strips::SensitivityRecord;
use crate::tensor::{per_sample_sq_grad_mean, Dataset, ModelGraph};

/// Diagonal of the empirical Fisher information.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub values: Vec<f64>,
    pub samples: usize,
}

/// `F_i = (1/n) Σ_samples (∂ log p(y|x; θ) / ∂θ_i)²`.
pub fn fisher_diag(model: &ModelGraph, data: &Dataset) -> Result<FisherDiag> {
    Ok(FisherDiag {
        values: per_sample_sq_grad_mean(model, &model.flat_params(), data)?,
        samples: data.len(),
    })
}

/// `‖F − F0‖²` over the diagonal.
pub fn fim_distance(f: &FisherDiag, f0: &FisherDiag) -> Result<f64> {
    if f.values.len() != f0.values.len() {
        return Err(CimError::Argument(format!(
            "Fisher diagonals differ in length: {} vs {}",
            f.values.len(),
            f0.values.len()
        )));
    }
    Ok(f.values
        .iter()
        .zip(&f0.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdOptConfig {
    /// Starting threshold as a quantile of the score distribution; 1.0 puts
    /// every strip in the 4-bit cluster.
    #[serde(default = "default_t0")]
    pub t0: f64,
    /// Step in ranks per unit of normalized slope.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Stop once `‖F − F0‖ ≤ eps_tol`. `None` means `1e-3 · ‖F(T0) − F0‖`.
    #[serde(default)]
    pub eps_tol: Option<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Finest half-width of the finite-difference window, in ranks.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Initial half-width as a fraction of `R`; the default spans every rank,
    /// so the first probes see both ends of the range. The window halves
    /// whenever the descent stalls, down to `fd_step`.
    #[serde(default = "default_window0")]
    pub window0: f64,
}

fn default_t0() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    1.0
}
fn default_max_iter() -> usize {
    50
}
fn default_fd_step() -> f64 {
    1.0
}
fn default_window0() -> f64 {
    1.0
}

impl Default for ThresholdOptConfig {
    fn default() -> Self {
        ThresholdOptConfig {
            t0: default_t0(),
            eta: default_eta(),
            eps_tol: None,
            max_iter: default_max_iter(),
            fd_step: default_fd_step(),
            window0: default_window0(),
        }
    }
}

impl ThresholdOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(CimError::Argument(format!("eta must be > 0, got {}", self.eta)));
        }
        if let Some(e) = self.eps_tol {
            if !(e >= 0.0) {
                return Err(CimError::Argument(format!("eps_tol must be >= 0, got {e}")));
            }
        }
        if self.max_iter == 0 {
            return Err(CimError::Argument("max_iter must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t0) {
            return Err(CimError::Argument(format!("t0 is a quantile in [0, 1], got {}", self.t0)));
        }
        if !(self.fd_step >= 1.0) {
            return Err(CimError::Argument(format!(
                "fd_step must span at least one rank, got {}",
                self.fd_step
            )));
        }
        if !(0.0..=1.0).contains(&self.window0) {
            return Err(CimError::Argument(format!(
                "window0 is a fraction of the strip count in [0, 1], got {}",
                self.window0
            )));
        }
        Ok(())
    }
}

/// Sorted score ladder mapping ranks to thresholds.
#[derive(Debug, Clone)]
pub struct RankScale {
    sorted: Vec<f64>,
}

impl RankScale {
    pub fn new(records: &[SensitivityRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(CimError::Argument("no sensitivity records".into()));
        }
        let mut sorted: Vec<f64> = records.iter().map(|r| r.score).collect();
        if sorted.iter().any(|s| s.is_nan()) {
            return Err(CimError::Argument("sensitivity scores contain NaN".into()));
        }
        sorted.sort_by(f64::total_cmp);
        Ok(RankScale { sorted })
    }

    /// Total strip count `R`.
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Threshold putting (at least) the `rank` lowest scores in the 4-bit
    /// cluster; rank 0 sits just below the minimum score.
    pub fn threshold(&self, rank: usize) -> f64 {
        match rank.min(self.len()) {
            0 => self.sorted[0].next_down(),
            r => self.sorted[r - 1],
        }
    }

    /// Number of 8-bit strips at threshold `t`.
    pub fn q_at(&self, t: f64) -> usize {
        self.sorted.len() - self.sorted.partition_point(|s| *s <= t)
    }

    /// Every distinct partition reachable by a threshold, as (rank, threshold).
    pub fn distinct_thresholds(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let mut last_q = None;
        for r in 0..=self.len() {
            let t = self.threshold(r);
            let q = self.q_at(t);
            if last_q != Some(q) {
                out.push((r, t));
                last_q = Some(q);
            }
        }
        out
    }
}

/// One row of the descent log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub t_rank: usize,
    pub t_score: f64,
    pub q: usize,
    pub p_low: usize,
    pub l: f64,
    pub g: f64,
    /// Finite-difference half-width in ranks.
    pub window: f64,
    pub best_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `‖F − F0‖` fell below the tolerance.
    Tolerance,
    /// The finest window brackets a local minimum or the step rounds to zero.
    Stationary,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    /// Best threshold seen, in score units.
    pub threshold: f64,
    pub rank: usize,
    pub loss: f64,
    /// Loss at the starting threshold.
    pub initial_loss: f64,
    pub stop: StopReason,
    pub log: Vec<IterationRecord>,
    /// Distinct partitions evaluated.
    pub evaluations: usize,
}

impl ThresholdResult {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Tolerance
    }
}

/// Fisher drift of the model compressed at each threshold, memoized per
/// partition.
pub struct DriftEvaluator<'a> {
    model: &'a ModelGraph,
    records: &'a [SensitivityRecord],
    data: &'a Dataset,
    reference: FisherDiag,
    scale: RankScale,
    cache: HashMap<usize, f64>,
}

impl<'a> DriftEvaluator<'a> {
    pub fn new(model: &'a ModelGraph, records: &'a [SensitivityRecord], data: &'a Dataset) -> Result<Self> {
        Ok(DriftEvaluator {
            model,
            records,
            data,
            reference: fisher_diag(model, data)?,
            scale: RankScale::new(records)?,
            cache: HashMap::new(),
        })
    }

    pub fn scale(&self) -> &RankScale {
        &self.scale
    }

    /// `L(T) = ‖F(Compress(θ, T)) − F0‖²`.
    pub fn loss_at_threshold(&mut self, t: f64) -> Result<f64> {
        let q = self.scale.q_at(t);
        if let Some(l) = self.cache.get(&q) {
            return Ok(*l);
        }
        let (compressed, _) = compress(self.model, self.records, t)?;
        let l = fim_distance(&fisher_diag(&compressed, self.data)?, &self.reference)?;
        self.cache.insert(q, l);
        Ok(l)
    }

    pub fn loss_at_rank(&mut self, rank: usize) -> Result<f64> {
        let t = self.scale.threshold(rank);
        self.loss_at_threshold(t)
    }

    pub fn evaluations(&self) -> usize {
        self.cache.len()
    }
}

/// Gradient descent on the Fisher drift over threshold rank.
///
/// The slope is a central difference of `ln L` over a window of ranks,
/// scaled to one unit per quantile, so one `eta` works across loss
/// magnitudes. The window starts wide, which smooths the piecewise-constant
/// loss, and halves around the best rank found whenever the descent stalls.
/// The best loss observed at any evaluated rank (probes included) is
/// returned.
pub fn optimize_threshold(
    model: &ModelGraph,
    records: &[SensitivityRecord],
    data: &Dataset,
    cfg: &ThresholdOptConfig,
) -> Result<ThresholdResult> {
    cfg.validate()?;
    let mut eval = DriftEvaluator::new(model, records, data)?;
    descend(&mut eval, cfg)
}

pub fn descend(eval: &mut DriftEvaluator<'_>, cfg: &ThresholdOptConfig) -> Result<ThresholdResult> {
    cfg.validate()?;
    let total = eval.scale().len();
    let rf = total as f64;
    let mut r = cfg.t0 * rf;
    let start_rank = r.round() as usize;
    let initial_loss = eval.loss_at_rank(start_rank)?;
    let eps = cfg.eps_tol.unwrap_or(1e-3 * initial_loss.sqrt());
    let mut window = cfg.fd_step.max(cfg.window0 * rf);

    let mut best = (initial_loss, start_rank);
    let mut log = Vec::new();
    let mut stop = StopReason::MaxIter;
    let observe = |best: &mut (f64, usize), l: f64, rank: usize| {
        if l < best.0 {
            *best = (l, rank);
        }
    };

    for iter in 1..=cfg.max_iter {
        let rank = (r.round() as usize).min(total);
        let t = eval.scale().threshold(rank);
        let l = eval.loss_at_rank(rank)?;
        observe(&mut best, l, rank);
        let q = eval.scale().q_at(t);
        let mut record = IterationRecord {
            iter,
            t_rank: rank,
            t_score: t,
            q,
            p_low: total - q,
            l,
            g: 0.0,
            window,
            best_l: best.0,
        };

        if l.sqrt() <= eps {
            log.push(record);
            stop = StopReason::Tolerance;
            break;
        }

        let lo = ((rank as f64 - window).round().max(0.0)) as usize;
        let hi = ((rank as f64 + window).round() as usize).min(total);
        let l_lo = eval.loss_at_rank(lo)?;
        let l_hi = eval.loss_at_rank(hi)?;
        observe(&mut best, l_lo, lo);
        observe(&mut best, l_hi, hi);
        // slope of ln L per unit quantile; an exact zero loss saturates it
        let g = if hi == lo || l_hi == l_lo {
            0.0
        } else {
            (rf * (l_hi.ln() - l_lo.ln()) / (hi - lo) as f64).clamp(-rf, rf)
        };
        record.g = g;
        record.best_l = best.0;
        log.push(record);

        let next = (r - cfg.eta * g).clamp(0.0, rf);
        let bracketed = l_lo >= l && l_hi >= l;
        if bracketed || (next.round() as usize).min(total) == rank {
            if window > cfg.fd_step {
                // refine around the incumbent
                window = cfg.fd_step.max(window / 2.0);
                r = best.1 as f64;
                continue;
            }
            stop = StopReason::Stationary;
            break;
        }
        r = next;
    }

    Ok(ThresholdResult {
        threshold: eval.scale().threshold(best.1),
        rank: best.1,
        loss: best.0,
        initial_loss,
        stop,
        log,
        evaluations: eval.evaluations(),
    })
}

/// Writes the descent log as CSV.
pub fn write_iteration_csv<W: Write>(out: W, log: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "T_rank", "T_score", "q", "p_low", "L", "g", "window", "best_L"])
        .map_err(|e| CimError::Parse {
            path: "iteration log".into(),
            message: e.to_string(),
        })?;
    for r in log {
        w.write_record([
            r.iter.to_string(),
            r.t_rank.to_string(),
            r.t_score.to_string(),
            r.q.to_string(),
            r.p_low.to_string(),
            r.l.to_string(),
            r.g.to_string(),
            r.window.to_string(),
            r.best_l.to_string(),
        ])
        .map_err(|e| CimError::Parse {
            path: "iteration log".into(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| CimError::io("iteration log", e))
}

/// Strips one 8-bit tile can host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityConfig {
    pub c: usize,
}

impl CapacityConfig {
    pub fn new(c: usize) -> Result<Self> {
        if c == 0 {
            return Err(CimError::Argument("crossbar capacity must be >= 1".into()));
        }
        Ok(CapacityConfig { c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Each layer's 8-bit count becomes a multiple of `C` on its own.
    #[default]
    PerLayer,
    /// Only the model-wide 8-bit count is aligned.
    Global,
}

/// Smallest `T' ≥ T` whose 8-bit count is a multiple of `C`. Only ever
/// demotes strips; with distinct scores `q' = C·⌊q/C⌋`.
pub fn align_scores(scores: &[f64], t: f64, cap: CapacityConfig) -> f64 {
    let mut high: Vec<f64> = scores.iter().copied().filter(|s| *s > t).collect();
    if high.len() % cap.c == 0 {
        return t;
    }
    high.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < high.len() {
        let v = high[i];
        // every strip scoring ≤ v is demoted together
        while i < high.len() && high[i] <= v {
            i += 1;
        }
        if (high.len() - i) % cap.c == 0 {
            return v;
        }
    }
    unreachable!("q' = 0 is always a multiple of C")
}

/// Global alignment: one threshold for the whole model.
pub fn align_to_capacity(records: &[SensitivityRecord], t: f64, cap: CapacityConfig) -> f64 {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    align_scores(&scores, t, cap)
}

/// Per-layer alignment: each layer gets its own threshold `≥ t`.
pub fn align_to_capacity_per_layer(
    records: &[SensitivityRecord],
    t: f64,
    cap: CapacityConfig,
) -> BTreeMap<usize, f64> {
    let mut per_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        per_layer.entry(r.key.layer_id).or_default().push(r.score);
    }
    per_layer
        .into_iter()
        .map(|(layer, scores)| (layer, align_scores(&scores, t, cap)))
        .collect()
}

/// Clusters at `t` after capacity alignment in the given mode.
pub fn aligned_map(
    records: &[SensitivityRecord],
    t: f64,
    cap: CapacityConfig,
    mode: AlignMode,
) -> Result<BitwidthMap> {
    match mode {
        AlignMode::PerLayer => {
            let per_layer = align_to_capacity_per_layer(records, t, cap);
            let mut map = assign_clusters_layered(records, t, &per_layer)?;
            map.threshold = t;
            Ok(map)
        }
        AlignMode::Global => {
            let aligned = align_to_capacity(records, t, cap);
            let mut map = assign_clusters_layered(records, aligned, &BTreeMap::new())?;
            map.threshold = t;
            Ok(map)
        }
    }
}

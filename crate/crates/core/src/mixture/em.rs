use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans_pp;
use super::linalg::{cholesky, trace, Mat4, Vec4, DIM, ZERO};
use super::{aic, bic, log_responsibilities, prepare, FeatureSet, GaussianComponent, MixtureError, MixtureModel};

/// Rows per reduction chunk. Fixed so sums are bit-identical for any thread count.
const CHUNK: usize = 4096;

/// Restart seeds are spaced by this odd constant from the master seed.
const RESTART_SEED_STEP: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once |LL(t) - LL(t-1)| < rel_tol * |LL(t-1)|.
    pub rel_tol: f64,
    pub n_restarts: usize,
    pub kmeans_iters: usize,
    /// Diagonal loading as a fraction of trace/4, applied every M-step.
    pub reg_scale: f64,
    /// Absolute lower bound on the diagonal loading.
    pub reg_floor: f64,
    /// Collapsed components may be re-seeded this many times per restart.
    pub max_reseeds: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-7,
            n_restarts: 4,
            kmeans_iters: 10,
            reg_scale: 1e-6,
            reg_floor: 1e-9,
            max_reseeds: 3,
        }
    }
}

impl EmConfig {
    fn ridge(&self, cov: &Mat4) -> f64 {
        (self.reg_scale * trace(cov) / DIM as f64).max(self.reg_floor)
    }

    fn regularize(&self, mut cov: Mat4) -> Mat4 {
        let r = self.ridge(&cov);
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] += r;
        }
        cov
    }
}

pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add(RESTART_SEED_STEP.wrapping_mul(restart as u64))
}

/// Fits a k-component mixture; the best restart by final log-likelihood wins.
pub fn em_fit(features: &FeatureSet, k: usize, seed: u64, config: &EmConfig) -> Result<MixtureModel, MixtureError> {
    if k == 0 {
        return Err(MixtureError::InvalidK);
    }
    let n = features.len();
    if n < 10 * k {
        return Err(MixtureError::TooFewSamples { n, k, need: 10 * k });
    }
    if let Some(i) = features.rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(MixtureError::NonFinite(i));
    }
    // Canonical row order: the fit is then a function of the multiset of rows.
    let mut data = features.rows.clone();
    data.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let global = config.regularize(scatter_all(&data));
    let mut best: Option<Run> = None;
    for restart in 0..config.n_restarts.max(1) {
        match run_once(&data, k, restart_seed(seed, restart), &global, config) {
            Ok(run) => {
                debug!(
                    "k={k} restart={restart}: ll={:.6} after {} iterations (converged={})",
                    run.ll, run.iterations, run.converged
                );
                if best.as_ref().is_none_or(|b| run.ll > b.ll) {
                    best = Some(Run { restart, ..run });
                }
            }
            Err(reseeds) => warn!("k={k} restart={restart}: abandoned after {reseeds} component collapses"),
        }
    }
    let run = best.ok_or(MixtureError::AllRestartsFailed { k })?;
    Ok(MixtureModel {
        k,
        components: run.components,
        log_likelihood: run.ll,
        aic: aic(run.ll, k),
        bic: bic(run.ll, k, n),
        n,
        standardization: features.standardization,
        seed,
        iterations: run.iterations,
        converged: run.converged,
        restart: run.restart,
        ll_trace: run.trace,
        reseed_iterations: run.reseed_iterations,
    })
}

struct Run {
    components: Vec<GaussianComponent>,
    ll: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    restart: usize,
    reseed_iterations: Vec<usize>,
}

/// One EM run. `Err` carries the number of collapses once the limit is exceeded.
fn run_once(data: &[Vec4], k: usize, seed: u64, global: &Mat4, config: &EmConfig) -> Result<Run, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (centroids, labels) = kmeans_pp(data, k, config.kmeans_iters, &mut rng);
    let mut components = init_from_labels(data, &centroids, &labels, global, config);

    let mut trace = Vec::new();
    let mut reseed_iterations = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..config.max_iter.max(1) {
        iterations = iter + 1;
        let prepared = match prepare(&components) {
            Some(p) => p,
            None => return Err(reseed_iterations.len()),
        };
        let stats = e_step(data, &prepared);
        let ll = stats.ll;
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if (ll - prev).abs() < config.rel_tol * prev.abs() {
                converged = true;
                break;
            }
        }
        if iterations == config.max_iter {
            break;
        }
        let collapsed = m_step(data, &stats, global, config, &mut components);
        if collapsed > 0 {
            for _ in 0..collapsed {
                reseed_iterations.push(iter);
            }
            debug!("k={k}: re-seeded {collapsed} collapsed component(s) at iteration {iter}");
            if reseed_iterations.len() > config.max_reseeds {
                return Err(reseed_iterations.len());
            }
        }
    }
    let ll = *trace.last().expect("at least one E-step");
    Ok(Run {
        components,
        ll,
        trace,
        iterations,
        converged,
        restart: 0,
        reseed_iterations,
    })
}

fn init_from_labels(
    data: &[Vec4],
    centroids: &[Vec4],
    labels: &[usize],
    global: &Mat4,
    config: &EmConfig,
) -> Vec<GaussianComponent> {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    let mut scatter = vec![ZERO; k];
    for (x, &j) in data.iter().zip(labels) {
        counts[j] += 1;
        add_outer(&mut scatter[j], x, &centroids[j], 1.0);
    }
    let total: f64 = counts.iter().map(|&c| c.max(1) as f64).sum();
    (0..k)
        .map(|j| {
            let covariance = if counts[j] >= 2 {
                let mut s = scatter[j];
                scale(&mut s, 1.0 / counts[j] as f64);
                mirror(&mut s);
                let s = config.regularize(s);
                if cholesky(&s).is_some() {
                    s
                } else {
                    *global
                }
            } else {
                *global
            };
            GaussianComponent {
                weight: counts[j].max(1) as f64 / total,
                mean: centroids[j],
                covariance,
            }
        })
        .collect()
}

/// Sufficient statistics of one E-step, taken about the current means.
struct Stats {
    ll: f64,
    nk: Vec<f64>,
    /// Sum of r (x - mean).
    sd: Vec<Vec4>,
    /// Lower triangle of the sum of r (x - mean)(x - mean)'.
    sdd: Vec<Mat4>,
    /// Largest responsibility of each point.
    max_resp: Vec<f64>,
}

impl Stats {
    fn zero(k: usize, n: usize) -> Self {
        Self {
            ll: 0.0,
            nk: vec![0.0; k],
            sd: vec![[0.0; DIM]; k],
            sdd: vec![ZERO; k],
            max_resp: Vec::with_capacity(n),
        }
    }

    fn absorb(&mut self, other: Stats) {
        self.ll += other.ll;
        for j in 0..self.nk.len() {
            self.nk[j] += other.nk[j];
            for a in 0..DIM {
                self.sd[j][a] += other.sd[j][a];
                for b in 0..=a {
                    self.sdd[j][a][b] += other.sdd[j][a][b];
                }
            }
        }
        self.max_resp.extend(other.max_resp);
    }
}

/// E-step fused with the accumulation the M-step needs. Chunks are reduced in
/// order, so the result does not depend on the thread count.
fn e_step(data: &[Vec4], prepared: &[super::Prepared]) -> Stats {
    let k = prepared.len();
    let parts: Vec<Stats> = data
        .par_chunks(CHUNK)
        .map(|xs| {
            let mut st = Stats::zero(k, xs.len());
            let mut r = vec![0.0; k];
            for x in xs {
                st.ll += log_responsibilities(x, prepared, &mut r);
                let mut top = 0.0f64;
                let acc = st.nk.iter_mut().zip(st.sd.iter_mut()).zip(st.sdd.iter_mut());
                for ((c, &w), ((nk, sd), sdd)) in prepared.iter().zip(&r).zip(acc) {
                    top = top.max(w);
                    if w == 0.0 {
                        continue;
                    }
                    *nk += w;
                    let d: Vec4 = std::array::from_fn(|i| x[i] - c.mean[i]);
                    for a in 0..DIM {
                        let wa = w * d[a];
                        sd[a] += wa;
                        for b in 0..=a {
                            sdd[a][b] += wa * d[b];
                        }
                    }
                }
                st.max_resp.push(top);
            }
            st
        })
        .collect();
    let mut total = Stats::zero(k, data.len());
    for p in parts {
        total.absorb(p);
    }
    total
}

/// Updates `components` in place from `stats`; returns how many were re-seeded.
fn m_step(
    data: &[Vec4],
    stats: &Stats,
    global: &Mat4,
    config: &EmConfig,
    components: &mut [GaussianComponent],
) -> usize {
    let n = data.len();
    let k = components.len();
    let collapsed: Vec<usize> = (0..k).filter(|&j| stats.nk[j] < 1.0).collect();
    for j in 0..k {
        let nk = stats.nk[j];
        if nk < 1.0 {
            continue;
        }
        // Statistics are about the old mean; shift them to the new one.
        let shift: Vec4 = std::array::from_fn(|a| stats.sd[j][a] / nk);
        let mut s = stats.sdd[j];
        scale(&mut s, 1.0 / nk);
        for a in 0..DIM {
            for b in 0..=a {
                s[a][b] -= shift[a] * shift[b];
            }
        }
        mirror(&mut s);
        let old = components[j].mean;
        components[j] = GaussianComponent {
            weight: nk / n as f64,
            mean: std::array::from_fn(|a| old[a] + shift[a]),
            covariance: config.regularize(s),
        };
    }
    if !collapsed.is_empty() {
        // Re-seed at the points the current model explains worst.
        let mut order: Vec<(f64, usize)> = stats.max_resp.iter().copied().zip(0..).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, &j) in collapsed.iter().enumerate() {
            let point = order[slot.min(n - 1)].1;
            components[j] = GaussianComponent {
                weight: 1.0 / k as f64,
                mean: data[point],
                covariance: *global,
            };
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in components.iter_mut() {
            c.weight /= total;
        }
    }
    collapsed.len()
}

/// Lower triangle of s += w (x - m)(x - m)'.
#[inline]
fn add_outer(s: &mut Mat4, x: &Vec4, m: &Vec4, w: f64) {
    if w == 0.0 {
        return;
    }
    let d: Vec4 = std::array::from_fn(|i| x[i] - m[i]);
    for a in 0..DIM {
        let wa = w * d[a];
        for b in 0..=a {
            s[a][b] += wa * d[b];
        }
    }
}

fn mirror(s: &mut Mat4) {
    for a in 0..DIM {
        for b in 0..a {
            s[b][a] = s[a][b];
        }
    }
}

fn scale(s: &mut Mat4, f: f64) {
    for row in s.iter_mut() {
        for v in row.iter_mut() {
            *v *= f;
        }
    }
}

fn scatter_all(data: &[Vec4]) -> Mat4 {
    let n = data.len() as f64;
    let mean: Vec4 = std::array::from_fn(|d| data.iter().map(|x| x[d]).sum::<f64>() / n);
    let mut s = ZERO;
    for x in data {
        add_outer(&mut s, x, &mean, 1.0);
    }
    scale(&mut s, 1.0 / n);
    mirror(&mut s);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    MinAic,
    FixedK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub k: usize,
    pub aic: f64,
    pub bic: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSweep {
    pub entries: Vec<SweepEntry>,
    pub chosen_k: usize,
    pub selection_rule: SelectionRule,
    /// Arg-min AIC over the sweep, reported whatever the selection rule.
    pub min_aic_k: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub sweep: ModelSweep,
    /// Fitted models in the same order as `sweep.entries`.
    pub models: Vec<MixtureModel>,
}

impl SweepOutcome {
    pub fn chosen(&self) -> &MixtureModel {
        self.models
            .iter()
            .find(|m| m.k == self.sweep.chosen_k)
            .expect("chosen k is always fitted")
    }
}

/// Fits every k in `k_lo..=k_hi` and selects one. `fixed_k` is used only
/// under [`SelectionRule::FixedK`].
pub fn sweep_k(
    features: &FeatureSet,
    k_lo: usize,
    k_hi: usize,
    selection: SelectionRule,
    fixed_k: usize,
    seed: u64,
    config: &EmConfig,
) -> Result<SweepOutcome, MixtureError> {
    if k_lo < 1 || k_hi > 25 || k_lo > k_hi {
        return Err(MixtureError::KRange { lo: k_lo, hi: k_hi });
    }
    let fits: Vec<(usize, Result<MixtureModel, MixtureError>)> = (k_lo..=k_hi)
        .into_par_iter()
        .map(|k| (k, em_fit(features, k, seed, config)))
        .collect();
    let mut models = Vec::new();
    for (k, fit) in fits {
        match fit {
            Ok(m) => models.push(m),
            Err(e) => warn!("k={k} omitted from sweep: {e}"),
        }
    }
    if models.is_empty() {
        return Err(MixtureError::EmptySweep);
    }
    let entries: Vec<SweepEntry> = models
        .iter()
        .map(|m| SweepEntry {
            k: m.k,
            aic: m.aic,
            bic: m.bic,
            log_likelihood: m.log_likelihood,
        })
        .collect();
    let min_aic_k = entries
        .iter()
        .fold(None::<&SweepEntry>, |best, e| match best {
            Some(b) if b.aic <= e.aic => Some(b),
            _ => Some(e),
        })
        .map(|e| e.k)
        .expect("non-empty sweep");
    let chosen_k = match selection {
        SelectionRule::MinAic => min_aic_k,
        SelectionRule::FixedK => {
            if !entries.iter().any(|e| e.k == fixed_k) {
                return Err(MixtureError::FixedKMissing(fixed_k));
            }
            fixed_k
        }
    };
    Ok(SweepOutcome {
        sweep: ModelSweep {
            entries,
            chosen_k,
            selection_rule: selection,
            min_aic_k,
        },
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blob(center: Vec4, sd: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec4> {
        let z = Normal::new(0.0, sd).unwrap();
        (0..n)
            .map(|_| std::array::from_fn(|d| center[d] + z.sample(rng)))
            .collect()
    }

    #[test]
    fn k1_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = blob([0.0; 4], 1.0, 400, &mut rng);
        for (i, r) in rows.iter_mut().enumerate() {
            r[1] += 0.5 * r[0];
            r[3] *= 1.0 + (i % 3) as f64;
        }
        let fs = FeatureSet::prestandardized(rows.clone());
        let cfg = EmConfig::default();
        let m = em_fit(&fs, 1, 11, &cfg).unwrap();

        // Oracle: MLE mean/covariance by direct summation, then the log-density sum.
        let n = rows.len() as f64;
        let mean: Vec4 = std::array::from_fn(|d| rows.iter().map(|r| r[d]).sum::<f64>() / n);
        let mut cov = nalgebra::Matrix4::<f64>::zeros();
        for r in &rows {
            let d = nalgebra::Vector4::from_fn(|i, _| r[i] - mean[i]);
            cov += d * d.transpose() / n;
        }
        let ridge = 1e-6 * cov.trace() / 4.0;
        cov += nalgebra::Matrix4::identity() * ridge;
        let inv = cov.try_inverse().unwrap();
        let logdet = cov.determinant().ln();
        let want: f64 = rows
            .iter()
            .map(|r| {
                let d = nalgebra::Vector4::from_fn(|i, _| r[i] - mean[i]);
                -0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + logdet + (d.transpose() * inv * d)[(0, 0)])
            })
            .sum();

        let c = &m.components[0];
        assert_eq!(c.weight, 1.0);
        for d in 0..4 {
            assert!((c.mean[d] - mean[d]).abs() < 1e-10);
            for e in 0..4 {
                assert!((c.covariance[d][e] - cov[(d, e)]).abs() < 1e-10);
            }
        }
        assert!((m.log_likelihood - want).abs() < 1e-8 * want.abs());
        assert!(m.converged);
    }

    #[test]
    fn rejects_small_samples_and_zero_k() {
        let fs = FeatureSet::prestandardized(vec![[0.0; 4]; 19]);
        let cfg = EmConfig::default();
        assert!(matches!(em_fit(&fs, 0, 0, &cfg), Err(MixtureError::InvalidK)));
        assert!(matches!(
            em_fit(&fs, 2, 0, &cfg),
            Err(MixtureError::TooFewSamples { n: 19, k: 2, need: 20 })
        ));
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = blob([-3.0; 4], 1.0, 150, &mut rng);
        rows.extend(blob([3.0; 4], 0.7, 150, &mut rng));
        let a = em_fit(&FeatureSet::prestandardized(rows.clone()), 2, 9, &EmConfig::default()).unwrap();
        rows.reverse();
        rows.swap(3, 200);
        let b = em_fit(&FeatureSet::prestandardized(rows), 2, 9, &EmConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_k_sweep_single_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fs = FeatureSet::prestandardized(blob([0.0; 4], 1.0, 200, &mut rng));
        let out = sweep_k(&fs, 6, 6, SelectionRule::FixedK, 6, 1, &EmConfig::default()).unwrap();
        assert_eq!(out.sweep.entries.len(), 1);
        assert_eq!(out.sweep.chosen_k, 6);
        assert_eq!(out.chosen().k, 6);
        assert!(matches!(
            sweep_k(&fs, 1, 2, SelectionRule::FixedK, 6, 1, &EmConfig::default()),
            Err(MixtureError::FixedKMissing(6))
        ));
        assert!(matches!(
            sweep_k(&fs, 0, 3, SelectionRule::MinAic, 6, 1, &EmConfig::default()),
            Err(MixtureError::KRange { .. })
        ));
        assert!(matches!(
            sweep_k(&fs, 2, 26, SelectionRule::MinAic, 6, 1, &EmConfig::default()),
            Err(MixtureError::KRange { .. })
        ));
    }

    #[test]
    fn restart_seeds_differ() {
        assert_eq!(restart_seed(42, 0), 42);
        assert_ne!(restart_seed(42, 1), restart_seed(42, 2));
    }
}

//! Disentanglement scores (MIG, SAP, FactorVAE score) and unsupervised
//! dependence scores of a latent representation.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::data::FactorDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::tensor::Tensor;

pub const MI_BINS: usize = 20;
pub const SAP_BINS: usize = 10;
pub const THREADS_ENV: &str = "C2VAE_THREADS";

/// Posterior means paired with ground-truth factor indices.
#[derive(Clone, Debug)]
pub struct LatentTable {
    /// `N x d`.
    pub means: Tensor,
    /// `N x F`, row-major.
    pub factors: Vec<usize>,
    pub num_factors: usize,
}

impl LatentTable {
    pub fn new(means: Tensor, factors: Vec<usize>, num_factors: usize) -> Result<Self> {
        if means.ndim() != 2 {
            return Err(Error::Shape { op: "latent_table", detail: format!("means {:?}", means.shape()) });
        }
        if num_factors == 0 || factors.len() != means.rows() * num_factors {
            return Err(Error::Shape {
                op: "latent_table",
                detail: format!("{} factor entries for {} rows x {num_factors}", factors.len(), means.rows()),
            });
        }
        if !means.all_finite() {
            return Err(Error::NonFinite("latent_table"));
        }
        Ok(Self { means, factors, num_factors })
    }

    pub fn from_dataset(means: Tensor, dataset: &FactorDataset) -> Result<Self> {
        Self::new(means, dataset.factors.clone(), dataset.spec.len())
    }

    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.means.cols()
    }

    pub fn latent_column(&self, j: usize) -> Vec<f64> {
        let d = self.dims();
        self.means.data().iter().skip(j).step_by(d).copied().collect()
    }

    pub fn factor_column(&self, k: usize) -> Vec<usize> {
        self.factors.iter().skip(k).step_by(self.num_factors).copied().collect()
    }
}

/// Worker count from `C2VAE_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|s| s.trim().parse().ok()).filter(|&t| t > 0).unwrap_or(1)
}

/// Maps `f` over `0..n` on up to `threads` scoped threads; output keeps index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("metric worker panicked")).collect()
    })
}

/// Equal-width labels over `[min, max]`; the top bin is right-closed.
pub fn discretize(column: &[f64], bins: usize) -> Vec<usize> {
    assert!(bins >= 2, "discretize needs at least two bins");
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; column.len()];
    }
    let width = (hi - lo) / bins as f64;
    column.iter().map(|&x| (((x - lo) / width) as usize).min(bins - 1)).collect()
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Plug-in entropy of a label sequence, in nats.
pub fn entropy(labels: &[usize]) -> f64 {
    let (l, k) = compact(labels);
    let mut counts = vec![0usize; k];
    for &x in &l {
        counts[x] += 1;
    }
    let n = labels.len() as f64;
    counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum()
}

/// Plug-in mutual information of two label sequences, in nats.
pub fn mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Invalid("mutual information of empty input".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Shape { op: "mutual_information", detail: format!("{} vs {}", a.len(), b.len()) });
    }
    let (a, ka) = compact(a);
    let (b, kb) = compact(b);
    let mut joint = vec![0usize; ka * kb];
    let mut pa = vec![0usize; ka];
    let mut pb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(&b) {
        joint[x * kb + y] += 1;
        pa[x] += 1;
        pb[y] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (pa[x] as f64 * pb[y] as f64)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

fn check_latents(table: &LatentTable, op: &'static str) -> Result<()> {
    if table.dims() < 2 {
        return Err(Error::Invalid(format!("{op} needs at least two latent dimensions")));
    }
    Ok(())
}

fn factor_labels(table: &LatentTable, k: usize, op: &'static str) -> Result<Vec<usize>> {
    let v = table.factor_column(k);
    if v.iter().all(|&x| x == v[0]) {
        return Err(Error::Invalid(format!("{op}: factor {k} takes a single value")));
    }
    Ok(v)
}

/// Mutual information gap, averaged over factors.
pub fn mig(table: &LatentTable, bins: usize) -> Result<f64> {
    check_latents(table, "mig")?;
    let codes: Vec<Vec<usize>> = (0..table.dims()).map(|j| discretize(&table.latent_column(j), bins)).collect();
    let mut total = 0.0;
    for k in 0..table.num_factors {
        let v = factor_labels(table, k, "mig")?;
        let h = entropy(&v);
        let mut mis = codes.iter().map(|c| mutual_information(c, &v)).collect::<Result<Vec<_>>>()?;
        mis.sort_by(|a, b| b.total_cmp(a));
        total += ((mis[0] - mis[1]) / h).clamp(0.0, 1.0);
    }
    Ok(total / table.num_factors as f64)
}

/// Accuracy of predicting `labels` by the majority label of each of `bins`
/// equal-width cells of `column` (ties go to the smallest label).
pub fn binned_accuracy(column: &[f64], labels: &[usize], bins: usize) -> f64 {
    let cells = discretize(column, bins);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; bins * k];
    for (&c, &y) in cells.iter().zip(labels) {
        counts[c * k + y] += 1;
    }
    let correct: usize = (0..bins).map(|c| counts[c * k..(c + 1) * k].iter().copied().max().unwrap_or(0)).sum();
    correct as f64 / labels.len() as f64
}

/// Separated attribute predictability: mean gap between the two most
/// predictive latent dimensions per factor.
pub fn sap(table: &LatentTable) -> Result<f64> {
    check_latents(table, "sap")?;
    let columns: Vec<Vec<f64>> = (0..table.dims()).map(|j| table.latent_column(j)).collect();
    let mut total = 0.0;
    for k in 0..table.num_factors {
        let v = factor_labels(table, k, "sap")?;
        let mut acc: Vec<f64> = columns.iter().map(|c| binned_accuracy(c, &v, SAP_BINS)).collect();
        acc.sort_by(|a, b| b.total_cmp(a));
        total += acc[0] - acc[1];
    }
    Ok(total / table.num_factors as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FacConfig {
    pub train_votes: usize,
    pub eval_votes: usize,
    pub probes: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for FacConfig {
    fn default() -> Self {
        Self { train_votes: 800, eval_votes: 200, probes: 64, seed: 0, threads: 1 }
    }
}

/// FactorVAE score from precomputed representations of every dataset image
/// (`means` is `N x d`, row `i` for image `i`).
pub fn fac_score(means: &Tensor, dataset: &FactorDataset, cfg: &FacConfig) -> Result<f64> {
    let (n, d) = (means.rows(), means.cols());
    if n != dataset.len() {
        return Err(Error::Shape { op: "fac_score", detail: format!("{n} representations for {} images", dataset.len()) });
    }
    let mut std = vec![0.0; d];
    for (j, s) in std.iter_mut().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| means.at(i, j)).collect();
        *s = variance(&col).sqrt();
    }
    let active: Vec<usize> = (0..d).filter(|&j| std[j] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::Invalid("fac_score: every latent dimension has zero variance".into()));
    }
    let factors: Vec<usize> = (0..dataset.spec.len()).filter(|&k| dataset.spec.factors[k].cardinality >= 2).collect();
    if factors.is_empty() {
        return Err(Error::Invalid("fac_score: no factor takes two values".into()));
    }
    // images by factor value; probes are drawn with replacement
    let groups: Vec<Vec<Vec<usize>>> = (0..dataset.spec.len())
        .map(|k| {
            let mut g = vec![Vec::new(); dataset.spec.factors[k].cardinality];
            for i in 0..n {
                g[dataset.factor(i, k)].push(i);
            }
            g
        })
        .collect();
    let total = cfg.train_votes + cfg.eval_votes;
    let votes = parallel_map(total, cfg.threads, |v| -> Result<(usize, usize)> {
        let mut r = rng::stream(cfg.seed, v as u64);
        let k = factors[r.random_range(0..factors.len())];
        let pool = &groups[k][r.random_range(0..groups[k].len())];
        if pool.is_empty() {
            return Err(Error::Invalid(format!("fac_score: a value of factor {k} has no images")));
        }
        let idx: Vec<usize> = (0..cfg.probes).map(|_| pool[r.random_range(0..pool.len())]).collect();
        let mut best = (f64::INFINITY, active[0]);
        for &j in &active {
            let col: Vec<f64> = idx.iter().map(|&i| means.at(i, j) / std[j]).collect();
            let var = variance(&col);
            if var < best.0 {
                best = (var, j);
            }
        }
        Ok((best.1, k))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let kmax = dataset.spec.len();
    let mut counts = vec![0usize; d * kmax];
    for &(j, k) in &votes[..cfg.train_votes] {
        counts[j * kmax + k] += 1;
    }
    let predict = |j: usize| -> Option<usize> {
        let row = &counts[j * kmax..(j + 1) * kmax];
        let best = row.iter().copied().max()?;
        (best > 0).then(|| row.iter().position(|&c| c == best).unwrap())
    };
    let correct = votes[cfg.train_votes..].iter().filter(|&&(j, k)| predict(j) == Some(k)).count();
    Ok(correct as f64 / cfg.eval_votes.max(1) as f64)
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Unsupervised dependence scores of the latent means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnsupScores {
    /// Mean pairwise histogram MI between latent dims.
    pub mi: f64,
    /// Gaussian total correlation `-½ ln det R`.
    pub tc: f64,
    /// `W₂(N(m, S), N(m, diag S)) / √tr S`.
    pub wcn: f64,
    /// The unnormalized `W₂`.
    pub w2: f64,
}

/// Sample covariance (`1/N`) of an `N x d` table.
pub fn covariance(means: &Tensor) -> Vec<f64> {
    let (n, d) = (means.rows(), means.cols());
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mu.iter_mut().zip(means.row(i)) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut s = vec![0.0; d * d];
    for i in 0..n {
        let r = means.row(i);
        for a in 0..d {
            let da = r[a] - mu[a];
            for b in a..d {
                s[a * d + b] += da * (r[b] - mu[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            s[a * d + b] /= n as f64;
            s[b * d + a] = s[a * d + b];
        }
    }
    s
}

/// Squared Bures distance between `S` and its diagonal:
/// `tr S + tr D - 2 tr (D^½ S D^½)^½`.
pub fn bures_to_diagonal_sq(s: &[f64], d: usize) -> f64 {
    let root: Vec<f64> = (0..d).map(|i| s[i * d + i].max(0.0).sqrt()).collect();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = root[i] * s[i * d + j] * root[j];
        }
    }
    let (eig, _) = linalg::symmetric_eigen(&m, d);
    let tr: f64 = (0..d).map(|i| s[i * d + i]).sum();
    (2.0 * tr - 2.0 * eig.iter().map(|e| e.max(0.0).sqrt()).sum::<f64>()).max(0.0)
}

/// Mean pairwise MI, Gaussian TC and normalized Wasserstein distance.
/// Zero-variance dimensions count as independent of the rest.
pub fn unsup_scores(table: &LatentTable, threads: usize) -> Result<UnsupScores> {
    let (n, d) = (table.len(), table.dims());
    if n <= d {
        return Err(Error::Invalid(format!("unsup_scores needs more rows ({n}) than dims ({d})")));
    }
    let codes: Vec<Vec<usize>> = (0..d).map(|j| discretize(&table.latent_column(j), MI_BINS)).collect();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).collect();
    let mis = parallel_map(pairs.len(), threads, |p| mutual_information(&codes[pairs[p].0], &codes[pairs[p].1]));
    let mi = if pairs.is_empty() { 0.0 } else { mis.into_iter().sum::<Result<f64>>()? / pairs.len() as f64 };

    let mut s = covariance(&table.means);
    // treat round-off level variance as constant
    for j in 0..d {
        let scale = table.latent_column(j).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if s[j * d + j].sqrt() <= 1e-12 * scale {
            for k in 0..d {
                s[j * d + k] = 0.0;
                s[k * d + j] = 0.0;
            }
        }
    }
    let (tc, wcn, w2) = gaussian_dependence(&s, d)?;
    Ok(UnsupScores { mi, tc, wcn, w2 })
}

/// Gaussian dependence of a covariance `s` (`d x d`, row-major):
/// `(tc, wcn, w2)` with `tc = -½ ln det R` of the correlation matrix and
/// `w2` the Bures distance to `diag(s)`, normalized by `√tr s` for `wcn`.
/// Zero-variance dims count as independent.
pub fn gaussian_dependence(s: &[f64], d: usize) -> Result<(f64, f64, f64)> {
    if s.len() != d * d {
        return Err(Error::Shape { op: "gaussian_dependence", detail: format!("{} entries for d = {d}", s.len()) });
    }
    let sd: Vec<f64> = (0..d).map(|i| s[i * d + i].max(0.0).sqrt()).collect();
    let mut r = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            r[a * d + b] = if a == b {
                1.0
            } else if sd[a] > 0.0 && sd[b] > 0.0 {
                s[a * d + b] / (sd[a] * sd[b])
            } else {
                0.0
            };
        }
    }
    let l = linalg::cholesky(&r, d)?;
    let tc = (-0.5 * linalg::log_det_from_cholesky(&l, d)).max(0.0);
    let w2 = bures_to_diagonal_sq(s, d).sqrt();
    let tr: f64 = (0..d).map(|i| s[i * d + i]).sum();
    let wcn = if tr > 0.0 { w2 / tr.sqrt() } else { 0.0 };
    Ok((tc, wcn, w2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mig: f64,
    pub sap: f64,
    pub fac: f64,
    pub mi_score: f64,
    pub tc_score: f64,
    pub wcn: f64,
    pub w2: f64,
    pub recon: f64,
    pub kl: f64,
}

pub const REPORT_HEADER: &str = "mig,sap,fac,mi_score,tc_score,wcn,w2,recon,kl";

impl MetricReport {
    pub fn values(&self) -> [f64; 9] {
        [self.mig, self.sap, self.fac, self.mi_score, self.tc_score, self.wcn, self.w2, self.recon, self.kl]
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }

    /// JSON object with the report and a free-form config echo.
    pub fn to_json(&self, config: &[(String, String)]) -> String {
        let mut out = String::from("{\n");
        for (name, v) in REPORT_HEADER.split(',').zip(self.values()) {
            writeln!(out, "  \"{name}\": {},", serde_json::to_string(&v).unwrap_or_else(|_| "null".into())).ok();
        }
        let echo: serde_json::Map<String, serde_json::Value> =
            config.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
        writeln!(out, "  \"config\": {}", serde_json::Value::Object(echo)).ok();
        out.push('}');
        out.push('\n');
        out
    }

    /// Mean and population standard deviation per field.
    pub fn summarize(reports: &[MetricReport]) -> (MetricReport, MetricReport) {
        let n = reports.len().max(1) as f64;
        let mut mean = [0.0; 9];
        let mut var = [0.0; 9];
        for r in reports {
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += v / n;
            }
        }
        for r in reports {
            for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let from = |a: [f64; 9]| MetricReport {
            mig: a[0],
            sap: a[1],
            fac: a[2],
            mi_score: a[3],
            tc_score: a[4],
            wcn: a[5],
            w2: a[6],
            recon: a[7],
            kl: a[8],
        };
        (from(mean), from(var.map(f64::sqrt)))
    }
}

/// Scores computed from a table of representations and the dataset it encodes.
/// Factors with a single value are skipped by MIG and SAP.
pub fn score_representation(means: &Tensor, dataset: &FactorDataset, fac: &FacConfig, recon: f64, kl: f64) -> Result<MetricReport> {
    let keep: Vec<usize> = (0..dataset.spec.len()).filter(|&k| dataset.spec.factors[k].cardinality >= 2).collect();
    let f = dataset.spec.len();
    let factors: Vec<usize> = (0..dataset.len()).flat_map(|i| keep.iter().map(move |&k| (i, k))).map(|(i, k)| dataset.factors[i * f + k]).collect();
    let table = LatentTable::new(means.clone(), factors, keep.len())?;
    let unsup = unsup_scores(&table, fac.threads)?;
    let report = MetricReport {
        mig: mig(&table, MI_BINS)?,
        sap: sap(&table)?,
        fac: fac_score(means, dataset, fac)?,
        mi_score: unsup.mi,
        tc_score: unsup.tc,
        wcn: unsup.wcn,
        w2: unsup.w2,
        recon,
        kl,
    };
    if report.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric report"));
    }
    Ok(report)
}


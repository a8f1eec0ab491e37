//! Saliency evaluation measures (CC, SIM, KLD) and fold aggregation.

use std::fmt::Write;

use thiserror::Error;

use crate::geometry::SaliencyMap;

/// Floor inside the KLD logarithm.
pub const KLD_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("maps differ in size: {0} vs {1} values")]
    ShapeMismatch(usize, usize),
    #[error("map is empty")]
    Empty,
    #[error("{0} map has zero variance; correlation is undefined")]
    ZeroVariance(&'static str),
    #[error("{0} map sums to zero")]
    ZeroSum(&'static str),
    #[error("no samples to aggregate")]
    NoSamples,
}

fn check(pred: &[f32], gt: &[f32]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn normalized(v: &[f32], which: &'static str) -> Result<Vec<f64>, MetricError> {
    let s: f64 = v.iter().map(|&x| x as f64).sum();
    if s <= 0.0 {
        return Err(MetricError::ZeroSum(which));
    }
    Ok(v.iter().map(|&x| x as f64 / s).collect())
}

/// Pearson correlation between the two maps.
pub fn cc(pred: &[f32], gt: &[f32]) -> Result<f64, MetricError> {
    check(pred, gt)?;
    let n = pred.len() as f64;
    let mp = pred.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mg = gt.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (dp, dg) = (p as f64 - mp, g as f64 - mg);
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp == 0.0 {
        return Err(MetricError::ZeroVariance("predicted"));
    }
    if vg == 0.0 {
        return Err(MetricError::ZeroVariance("ground-truth"));
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

/// `Σ min(P, Q)` over sum-normalized maps.
pub fn sim(pred: &[f32], gt: &[f32]) -> Result<f64, MetricError> {
    check(pred, gt)?;
    let p = normalized(pred, "predicted")?;
    let q = normalized(gt, "ground-truth")?;
    Ok(p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum())
}

/// `Σ Q ln(Q / (P + ε) + ε)` over sum-normalized maps, `Q` the ground truth.
pub fn kld(pred: &[f32], gt: &[f32]) -> Result<f64, MetricError> {
    check(pred, gt)?;
    let p = normalized(pred, "predicted")?;
    let q = normalized(gt, "ground-truth")?;
    Ok(p.iter().zip(&q).map(|(a, b)| b * (b / (a + KLD_EPS) + KLD_EPS).ln()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScores {
    pub cc: f64,
    pub sim: f64,
    pub kld: f64,
}

/// All three measures for one prediction at ground-truth resolution.
pub fn evaluate(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<SampleScores, MetricError> {
    let (p, g) = (pred.data(), gt.data());
    Ok(SampleScores {
        cc: cc(p, g)?,
        sim: sim(p, g)?,
        kld: kld(p, g)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricStat {
    pub mean: f64,
    /// Population std: across fold means for the overall report, across
    /// samples for a single fold.
    pub std: f64,
    /// Population std across all samples.
    pub sample_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub cc: MetricStat,
    pub sim: MetricStat,
    pub kld: MetricStat,
    pub n: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn fold_report(s: &[SampleScores]) -> MetricsReport {
    let stat = |f: fn(&SampleScores) -> f64| {
        let (mean, std) = mean_std(&s.iter().map(f).collect::<Vec<_>>());
        MetricStat {
            mean,
            std,
            sample_std: std,
        }
    };
    MetricsReport {
        cc: stat(|x| x.cc),
        sim: stat(|x| x.sim),
        kld: stat(|x| x.kld),
        n: s.len(),
    }
}

/// Per-fold reports and the overall report (mean and std of fold means).
pub fn aggregate(folds: &[Vec<SampleScores>]) -> Result<(Vec<MetricsReport>, MetricsReport), MetricError> {
    if folds.is_empty() || folds.iter().any(Vec::is_empty) {
        return Err(MetricError::NoSamples);
    }
    let per: Vec<MetricsReport> = folds.iter().map(|f| fold_report(f)).collect();
    let all: Vec<SampleScores> = folds.iter().flatten().copied().collect();
    let pooled = fold_report(&all);
    let over = |f: fn(&MetricsReport) -> MetricStat, pooled: MetricStat| {
        let (mean, std) = mean_std(&per.iter().map(|r| f(r).mean).collect::<Vec<_>>());
        MetricStat {
            mean,
            std,
            sample_std: pooled.sample_std,
        }
    };
    let overall = MetricsReport {
        cc: over(|r| r.cc, pooled.cc),
        sim: over(|r| r.sim, pooled.sim),
        kld: over(|r| r.kld, pooled.kld),
        n: all.len(),
    };
    Ok((per, overall))
}

fn rows(per: &[MetricsReport], overall: &MetricsReport) -> Vec<(String, MetricsReport)> {
    per.iter()
        .enumerate()
        .map(|(i, r)| (i.to_string(), *r))
        .chain(std::iter::once(("overall".to_string(), *overall)))
        .collect()
}

/// `fold,metric,mean,std,sample_std,n` lines.
pub fn report_csv(per: &[MetricsReport], overall: &MetricsReport) -> String {
    let mut s = String::from("fold,metric,mean,std,sample_std,n\n");
    for (fold, r) in rows(per, overall) {
        for (name, m) in [("cc", r.cc), ("sim", r.sim), ("kld", r.kld)] {
            writeln!(s, "{fold},{name},{:.6},{:.6},{:.6},{}", m.mean, m.std, m.sample_std, r.n).unwrap();
        }
    }
    s
}

/// Aligned `mean ± std` table, one row per fold plus the overall row.
pub fn report_table(per: &[MetricsReport], overall: &MetricsReport) -> String {
    let mut s = format!("{:<10}{:>20}{:>20}{:>20}\n", "fold", "CC (↑)", "SIM (↑)", "KLD (↓)");
    for (fold, r) in rows(per, overall) {
        let cell = |m: MetricStat| format!("{:.3} ± {:.3}", m.mean, m.std);
        writeln!(s, "{:<10}{:>20}{:>20}{:>20}", fold, cell(r.cc), cell(r.sim), cell(r.kld)).unwrap();
    }
    s
}

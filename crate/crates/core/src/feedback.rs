//! Statistics for clinician Likert ratings of explanation formats.

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_SCALE: (i64, i64) = (1, 5);

#[derive(Debug, thiserror::Error)]
pub enum FeedbackError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("missing rating for rater {rater} in column {column}")]
    MissingCell { rater: String, column: String },
    #[error("rating {value} for rater {rater} in column {column} is outside {min}..={max}")]
    OutOfBounds {
        rater: String,
        column: String,
        value: String,
        min: i64,
        max: i64,
    },
    #[error("malformed ratings: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Raters in rows, formats in columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    pub raters: Vec<String>,
    pub formats: Vec<String>,
    pub scale: (i64, i64),
    pub values: Vec<Vec<i64>>,
}

impl RatingsMatrix {
    pub fn new(raters: Vec<String>, formats: Vec<String>, scale: (i64, i64), values: Vec<Vec<i64>>) -> Result<Self, FeedbackError> {
        if raters.len() < 2 || formats.len() < 2 {
            return Err(FeedbackError::DegenerateInput(format!(
                "need at least 2 raters and 2 formats, got {} and {}",
                raters.len(),
                formats.len()
            )));
        }
        if scale.0 > scale.1 {
            return Err(FeedbackError::Malformed(format!("scale {}..{} is empty", scale.0, scale.1)));
        }
        if values.len() != raters.len() {
            return Err(FeedbackError::Malformed("row count differs from rater count".into()));
        }
        for (r, row) in values.iter().enumerate() {
            if row.len() != formats.len() {
                return Err(FeedbackError::Malformed(format!("rater {} has {} ratings", raters[r], row.len())));
            }
            for (c, &v) in row.iter().enumerate() {
                if v < scale.0 || v > scale.1 {
                    return Err(FeedbackError::OutOfBounds {
                        rater: raters[r].clone(),
                        column: formats[c].clone(),
                        value: v.to_string(),
                        min: scale.0,
                        max: scale.1,
                    });
                }
            }
        }
        Ok(Self {
            raters,
            formats,
            scale,
            values,
        })
    }

    /// Header row required; first column is the rater id. Blank cells are rejected.
    pub fn from_csv<R: Read>(reader: R, scale: (i64, i64)) -> Result<Self, FeedbackError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 2 {
            return Err(FeedbackError::DegenerateInput("no format columns".into()));
        }
        let formats: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut raters = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let rater = rec.get(0).unwrap_or_default().to_string();
            let mut row = Vec::with_capacity(formats.len());
            for (c, column) in formats.iter().enumerate() {
                let cell = rec.get(c + 1).unwrap_or_default();
                if cell.is_empty() {
                    return Err(FeedbackError::MissingCell {
                        rater,
                        column: column.clone(),
                    });
                }
                let v: i64 = cell.parse().map_err(|_| FeedbackError::OutOfBounds {
                    rater: rater.clone(),
                    column: column.clone(),
                    value: cell.to_string(),
                    min: scale.0,
                    max: scale.1,
                })?;
                row.push(v);
            }
            raters.push(rater);
            values.push(row);
        }
        Self::new(raters, formats, scale, values)
    }

    pub fn n(&self) -> usize {
        self.raters.len()
    }

    pub fn k(&self) -> usize {
        self.formats.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j] as f64).collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    pub format: String,
    pub mean: f64,
    pub sd: f64,
}

pub fn describe(m: &RatingsMatrix) -> Vec<Descriptive> {
    (0..m.k())
        .map(|j| {
            let col = m.column(j);
            Descriptive {
                format: m.formats[j].clone(),
                mean: mean(&col),
                sd: sample_sd(&col),
            }
        })
        .collect()
}

/// Upper tail of F(d1, d2) at `f`.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// Two-sided tail of Student's t with `df` degrees of freedom.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_effect: usize,
    pub df_error: usize,
    pub p: f64,
    pub ss_effect: f64,
    pub ss_error: f64,
    pub ss_subject: f64,
    /// Set when every residual is zero but formats differ.
    pub zero_error_variance: bool,
}

/// One-way repeated-measures ANOVA with formats as the within-rater factor.
pub fn rm_anova(m: &RatingsMatrix) -> Result<AnovaResult, FeedbackError> {
    let (n, k) = (m.n(), m.k());
    if n < 2 || k < 2 {
        return Err(FeedbackError::DegenerateInput("need n >= 2 and k >= 2".into()));
    }
    let x: Vec<Vec<f64>> = m.values.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let grand = x.iter().flatten().sum::<f64>() / (n * k) as f64;
    let row_means: Vec<f64> = x.iter().map(|r| mean(r)).collect();
    let col_means: Vec<f64> = (0..k).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let ss_subject = k as f64 * row_means.iter().map(|r| (r - grand).powi(2)).sum::<f64>();
    let ss_effect = n as f64 * col_means.iter().map(|c| (c - grand).powi(2)).sum::<f64>();
    let mut ss_error = 0.0;
    for (i, row) in x.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            ss_error += (v - row_means[i] - col_means[j] + grand).powi(2);
        }
    }
    let df_effect = k - 1;
    let df_error = (n - 1) * (k - 1);
    // Integer data: anything this small is rounding noise.
    let eps = 1e-9 * (1.0 + ss_effect + ss_subject);
    let (f, p, zero_error_variance) = if ss_effect <= eps {
        (0.0, 1.0, false)
    } else if ss_error <= eps {
        (f64::INFINITY, 0.0, true)
    } else {
        let f = (ss_effect / df_effect as f64) / (ss_error / df_error as f64);
        (f, f_sf(f, df_effect as f64, df_error as f64), false)
    };
    Ok(AnovaResult {
        f,
        df_effect,
        df_error,
        p,
        ss_effect: ss_effect.max(0.0),
        ss_error: if ss_error <= eps { 0.0 } else { ss_error },
        ss_subject,
        zero_error_variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// All differences equal and non-zero.
    pub degenerate: bool,
}

pub fn paired_t(a: &[f64], b: &[f64]) -> Result<PairedT, FeedbackError> {
    if a.len() != b.len() {
        return Err(FeedbackError::Malformed("paired columns differ in length".into()));
    }
    if a.len() < 2 {
        return Err(FeedbackError::DegenerateInput("need at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let sd = sample_sd(&d);
    let df = d.len() - 1;
    if sd == 0.0 {
        return Ok(if md == 0.0 {
            PairedT { t: 0.0, df, p: 1.0, degenerate: false }
        } else {
            PairedT {
                t: md.signum() * f64::INFINITY,
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = md / (sd / (d.len() as f64).sqrt());
    Ok(PairedT {
        t,
        df,
        p: t_two_sided(t, df as f64),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmResult {
    /// In input order.
    pub adjusted: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Holm step-down adjustment.
pub fn holm_adjust(raw: &[f64], alpha: f64) -> HolmResult {
    let m = raw.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut rejected = vec![false; m];
    let mut running = 0.0f64;
    let mut still = true;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * raw[i]).min(1.0));
        adjusted[i] = running;
        still = still && running <= alpha;
        rejected[i] = still;
    }
    HolmResult { adjusted, rejected }
}

pub fn bonferroni_rejections(raw: &[f64], alpha: f64) -> Vec<bool> {
    let m = raw.len() as f64;
    raw.iter().map(|p| (p * m).min(1.0) <= alpha).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub format_i: String,
    pub format_j: String,
    pub t: f64,
    pub raw_p: f64,
    pub adjusted_p: f64,
    pub rejected: bool,
    pub degenerate: bool,
}

/// Every format pair (i < j) compared with a paired t-test, Holm-adjusted jointly.
pub fn pairwise(m: &RatingsMatrix, alpha: f64) -> Result<Vec<Comparison>, FeedbackError> {
    let mut out = Vec::new();
    for i in 0..m.k() {
        for j in i + 1..m.k() {
            let r = paired_t(&m.column(i), &m.column(j))?;
            out.push(Comparison {
                format_i: m.formats[i].clone(),
                format_j: m.formats[j].clone(),
                t: r.t,
                raw_p: r.p,
                adjusted_p: 0.0,
                rejected: false,
                degenerate: r.degenerate,
            });
        }
    }
    let raw: Vec<f64> = out.iter().map(|c| c.raw_p).collect();
    let h = holm_adjust(&raw, alpha);
    for (c, (a, r)) in out.iter_mut().zip(h.adjusted.into_iter().zip(h.rejected)) {
        c.adjusted_p = a;
        c.rejected = r;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub n_raters: usize,
    pub scale: (i64, i64),
    pub alpha: f64,
    pub descriptives: Vec<Descriptive>,
    pub anova: AnovaResult,
    pub pairwise: Vec<Comparison>,
}

pub fn analyze(m: &RatingsMatrix, alpha: f64) -> Result<FeedbackReport, FeedbackError> {
    Ok(FeedbackReport {
        n_raters: m.n(),
        scale: m.scale,
        alpha,
        descriptives: describe(m),
        anova: rm_anova(m)?,
        pairwise: pairwise(m, alpha)?,
    })
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

/// Descriptives table with its format column sized to the widest name.
pub fn descriptives_table(d: &[Descriptive], n: usize) -> String {
    let w = d.iter().map(|x| x.format.len()).max().unwrap_or(0).max("Explanation Format".len());
    let mut out = format!("{:<w$}  {:>6}  {:>6}\n", "Explanation Format", "Mean", "SD");
    for x in d {
        let _ = writeln!(out, "{:<w$}  {:>6.2}  {:>6.2}", x.format, x.mean, x.sd);
    }
    let _ = writeln!(out, "(n = {n})");
    out
}

impl FeedbackReport {
    pub fn to_json(&self) -> String {
        // infinite F is not representable in JSON; serde_json writes null
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut out = descriptives_table(&self.descriptives, self.n_raters);
        let a = &self.anova;
        let _ = writeln!(
            out,
            "\nRM-ANOVA: F({}, {}) = {:.3}, p {}{}",
            a.df_effect,
            a.df_error,
            a.f,
            if a.p < 0.001 { "" } else { "= " },
            fmt_p(a.p)
        );
        if a.zero_error_variance {
            out.push_str("warning: zero error variance\n");
        }
        let _ = writeln!(out, "\nHolm-adjusted paired t-tests (alpha = {}):", self.alpha);
        for c in &self.pairwise {
            let _ = writeln!(
                out,
                "{} vs {}: t = {:.3}, p = {}, adj p = {}{}",
                c.format_i,
                c.format_j,
                c.t,
                fmt_p(c.raw_p),
                fmt_p(c.adjusted_p),
                if c.rejected { " *" } else { "" }
            );
        }
        out
    }
}

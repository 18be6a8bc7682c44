//! Timing and buffer instrumentation for full vs linearly projected attention.
//!
//! Each measurement runs the per-head attention kernel forward only, on inputs
//! that are already split into heads. Query/key/value projections and the
//! output projection are excluded because they cost `O(n D^2)` for both
//! variants and would blur the sequence-length scaling.

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use catf_core::model::attention::{
    attention_probe_peak, project_keys_values, projected_attention, reset_attention_probe, scaled_dot_product_attention,
};
use catf_core::{Tape, Tensor};
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-head key/query width used by every benchmark input.
pub const D_K: usize = 32;
/// Warm-up calls before timing starts.
const WARMUP: usize = 3;
/// Inner loops grow until the timer resolution is at most this share of one sample.
const RESOLUTION_SHARE: f64 = 0.01;
/// Largest tolerated output difference in the correctness gate.
const GATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark setup: {0}")]
    Invalid(String),
    #[error("variants disagree at n = {n}: max abs difference {diff:e}")]
    Gate { n: usize, diff: f64 },
    #[error(transparent)]
    Core(#[from] catf_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// `softmax(Q K^T / sqrt(d_k)) V`
    Full,
    /// Keys and values compressed by a separate `[n, p]` projection per head.
    Linear,
    /// One `[n, p]` projection shared by all heads.
    LinearShared,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Linear, Variant::LinearShared];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Linear => "linear",
            Variant::LinearShared => "linear-shared",
        }
    }

    fn is_projected(self) -> bool {
        self != Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            BenchError::Invalid(format!(
                "unknown variant {s:?} (expected full, linear or linear-shared)"
            ))
        })
    }
}

/// One measured `(variant, n)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub n: usize,
    /// Projected length; equals `n` for full attention.
    pub p: usize,
    /// Median per-call time in microseconds.
    pub median_us: f64,
    /// Interquartile range of the per-call time in microseconds.
    pub iqr_us: f64,
    /// Bytes of the largest per-head attention weight matrix.
    pub peak_buffer_bytes: usize,
    /// Calls folded into each timed sample.
    pub inner_loop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub heads: usize,
    pub d_k: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Worker threads used by the kernels.
    pub threads: usize,
    /// Whether the measuring thread was pinned to a core.
    pub pinned: bool,
    /// Whether freed buffers stayed in the process heap during timing.
    pub heap_retained: bool,
}

impl BenchReport {
    pub fn rows_for(&self, variant: Variant) -> Vec<&BenchRow> {
        self.rows.iter().filter(|r| r.variant == variant).collect()
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    /// Fitted log-log slope of median time against `n` for one variant.
    pub fn slope(&self, variant: Variant) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows_for(variant)
            .iter()
            .map(|r| (r.n as f64, r.median_us))
            .collect();
        loglog_slope(&pts)
    }

    pub fn peak_bytes(&self, variant: Variant, n: usize) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.n == n)
            .map(|r| r.peak_buffer_bytes)
    }
}

/// Least-squares slope of `ln y` against `ln x`. `None` with fewer than two
/// distinct `x` values or any non-positive coordinate.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Fixed inputs for one sequence length.
struct Inputs {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// `[h, n, p]`
    f: Tensor,
    g: Tensor,
    /// `[n, p]`
    f_shared: Tensor,
    g_shared: Tensor,
}

impl Inputs {
    fn random(n: usize, p: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj_std = 1.0 / (n as f64).sqrt();
        Inputs {
            q: Tensor::randn(&[heads, n, D_K], 1.0, rng),
            k: Tensor::randn(&[heads, n, D_K], 1.0, rng),
            v: Tensor::randn(&[heads, n, D_K], 1.0, rng),
            f: Tensor::randn(&[heads, n, p], proj_std, rng),
            g: Tensor::randn(&[heads, n, p], proj_std, rng),
            f_shared: Tensor::randn(&[n, p], proj_std, rng),
            g_shared: Tensor::randn(&[n, p], proj_std, rng),
        }
    }

    /// Identity projections at `p = n`, per head and shared.
    fn identity(n: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let eye = Tensor::eye(n);
        let stacked = Tensor::from_fn(&[heads, n, n], |i| eye.data()[i % (n * n)]);
        Inputs {
            f: stacked.clone(),
            g: stacked,
            f_shared: eye.clone(),
            g_shared: eye,
            ..Inputs::random(n, n, heads, rng)
        }
    }
}

/// One forward pass of `variant`; returns the output values.
fn run_kernel(variant: Variant, x: &Inputs) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(x.q.clone());
    let k = tape.constant(x.k.clone());
    let v = tape.constant(x.v.clone());
    let out = match variant {
        Variant::Full => scaled_dot_product_attention(&mut tape, q, k, v, None)?,
        Variant::Linear | Variant::LinearShared => {
            let (f, g) = if variant == Variant::Linear {
                (x.f.clone(), x.g.clone())
            } else {
                (x.f_shared.clone(), x.g_shared.clone())
            };
            let f = tape.constant(f);
            let g = tape.constant(g);
            let (kp, vp) = project_keys_values(&mut tape, k, v, f, g)?;
            projected_attention(&mut tape, q, kp, vp)?
        }
    };
    Ok(tape.value(out).clone())
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..20 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Keep freed memory in the heap. Otherwise glibc hands large tape buffers back
/// to the kernel after every call and the next call spends much of its time
/// faulting fresh pages in, which swamps the arithmetic being measured.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn retain_heap() -> bool {
    // 32 MiB is the largest mmap threshold glibc accepts on 64-bit targets
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20) == 1 && libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX) == 1
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn retain_heap() -> bool {
    false
}

/// Inner loop length at which the timer resolution is at most 1% of one sample.
fn calibrate(variant: Variant, x: &Inputs, resolution: Duration) -> Result<usize> {
    for _ in 0..WARMUP {
        run_kernel(variant, x)?;
    }
    let mut inner = 1usize;
    loop {
        let mut samples = (0..3)
            .map(|_| time_once(variant, x, inner))
            .collect::<Result<Vec<_>>>()?;
        samples.sort_by(f64::total_cmp);
        let median = samples[1] * inner as f64 * 1e-6;
        if resolution.as_secs_f64() <= RESOLUTION_SHARE * median {
            return Ok(inner);
        }
        let needed = resolution.as_secs_f64() / (RESOLUTION_SHARE * median.max(1e-12));
        inner = (inner as f64 * needed.max(2.0)).ceil() as usize;
    }
}

/// One sample in microseconds per call.
fn time_once(variant: Variant, x: &Inputs, inner: usize) -> Result<f64> {
    let t0 = Instant::now();
    for _ in 0..inner {
        std::hint::black_box(run_kernel(variant, x)?);
    }
    Ok(t0.elapsed().as_secs_f64() * 1e6 / inner as f64)
}

/// Max abs output difference between full attention and each projected variant
/// at `p = n` with identity projections.
pub fn identity_gate(n: usize, heads: usize, seed: u64) -> Result<f64> {
    let x = Inputs::identity(n, heads, &mut ChaCha8Rng::seed_from_u64(seed));
    let full = run_kernel(Variant::Full, &x)?;
    let mut worst = 0.0f64;
    for variant in [Variant::Linear, Variant::LinearShared] {
        let out = run_kernel(variant, &x)?;
        for (a, b) in full.data().iter().zip(out.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Time each variant at each sequence length. Linear variants use projected
/// length `min(p, n)`.
pub fn bench_attention(
    variants: &[Variant],
    seq_lens: &[usize],
    p: usize,
    heads: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if variants.is_empty() || seq_lens.is_empty() {
        return Err(BenchError::Invalid(
            "need at least one variant and one sequence length".into(),
        ));
    }
    if repetitions < 10 {
        return Err(BenchError::Invalid(format!(
            "repetitions must be at least 10, got {repetitions}"
        )));
    }
    if p == 0 || heads == 0 || seq_lens.contains(&0) {
        return Err(BenchError::Invalid(
            "p, heads and sequence lengths must be positive".into(),
        ));
    }
    let gate_n = *seq_lens.iter().min().unwrap();
    let diff = identity_gate(gate_n, heads, seed)?;
    if !(diff < GATE_TOLERANCE) {
        return Err(BenchError::Gate { n: gate_n, diff });
    }

    let pinned = core_affinity::get_core_ids()
        .and_then(|ids| ids.first().copied())
        .is_some_and(core_affinity::set_for_current);
    let heap_retained = retain_heap();
    let resolution = timer_resolution();
    struct Cell {
        variant: Variant,
        n: usize,
        p: usize,
        input: usize,
        inner: usize,
        peak: usize,
        samples: Vec<f64>,
    }
    let mut inputs = Vec::with_capacity(seq_lens.len());
    let mut cells = Vec::new();
    for &n in seq_lens {
        let pn = p.min(n);
        let x = Inputs::random(n, pn, heads, &mut ChaCha8Rng::seed_from_u64(seed ^ n as u64));
        for &variant in variants {
            reset_attention_probe();
            run_kernel(variant, &x)?;
            cells.push(Cell {
                variant,
                n,
                p: if variant.is_projected() { pn } else { n },
                input: inputs.len(),
                inner: calibrate(variant, &x, resolution)?,
                peak: attention_probe_peak(),
                samples: Vec::with_capacity(repetitions),
            });
        }
        inputs.push(x);
    }
    // one sample per cell per round, so slow spells of the machine hit every
    // cell alike instead of bending the scaling curve; an untimed call first
    // brings the cell's data back into cache
    for _ in 0..repetitions {
        for c in &mut cells {
            let x = &inputs[c.input];
            std::hint::black_box(run_kernel(c.variant, x)?);
            c.samples.push(time_once(c.variant, x, c.inner)?);
        }
    }
    let rows = cells
        .into_iter()
        .map(|mut c| {
            c.samples.sort_by(f64::total_cmp);
            BenchRow {
                variant: c.variant,
                n: c.n,
                p: c.p,
                median_us: quantile(&c.samples, 0.5),
                iqr_us: quantile(&c.samples, 0.75) - quantile(&c.samples, 0.25),
                peak_buffer_bytes: c.peak,
                inner_loop: c.inner,
            }
        })
        .collect();
    Ok(BenchReport {
        rows,
        heads,
        d_k: D_K,
        repetitions,
        seed,
        // the tensor kernels never spawn workers
        threads: 1,
        pinned,
        heap_retained,
    })
}

/// Files written by [`render_report`].
#[derive(Clone, Debug)]
pub struct RenderedReport {
    pub table: PathBuf,
    pub plot: PathBuf,
    pub slopes: Vec<(Variant, f64)>,
}

/// Write `bench.csv` and a log-log `bench.svg` (time against `n`, one line per
/// variant, fitted slopes in the legend) into `dir`.
pub fn render_report(report: &BenchReport, dir: &Path) -> Result<RenderedReport> {
    if report.rows.is_empty() {
        return Err(BenchError::Invalid("empty report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let table = dir.join("bench.csv");
    let mut w = csv::Writer::from_writer(File::create(&table)?);
    w.write_record(["variant", "n", "p", "median_us", "iqr_us", "peak_buffer_bytes"])?;
    for r in &report.rows {
        w.write_record([
            r.variant.name().to_string(),
            r.n.to_string(),
            r.p.to_string(),
            format!("{:.3}", r.median_us),
            format!("{:.3}", r.iqr_us),
            r.peak_buffer_bytes.to_string(),
        ])?;
    }
    w.flush()?;

    let slopes: Vec<(Variant, f64)> = report
        .variants()
        .into_iter()
        .filter_map(|v| report.slope(v).map(|s| (v, s)))
        .collect();
    let plot = dir.join("bench.svg");
    draw_plot(report, &slopes, &plot).map_err(|e| BenchError::Plot(e.to_string()))?;
    Ok(RenderedReport { table, plot, slopes })
}

fn draw_plot(
    report: &BenchReport,
    slopes: &[(Variant, f64)],
    path: &Path,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let n_min = report.rows.iter().map(|r| r.n).min().unwrap() as f64;
    let n_max = report.rows.iter().map(|r| r.n).max().unwrap() as f64;
    let t_min = report.rows.iter().map(|r| r.median_us).fold(f64::INFINITY, f64::min);
    let t_max = report.rows.iter().map(|r| r.median_us).fold(0.0, f64::max);

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("attention forward time, {} heads, d_k = {}", report.heads, report.d_k),
            ("sans-serif", 18),
        )
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(
            (n_min * 0.8..n_max * 1.25).log_scale(),
            (t_min * 0.5..t_max * 2.0).log_scale(),
        )?;
    chart.configure_mesh().x_desc("n").y_desc("median time (us)").draw()?;

    let palette = [RED, BLUE, GREEN, MAGENTA];
    for (i, variant) in report.variants().into_iter().enumerate() {
        let color = palette[i % palette.len()];
        let pts: Vec<(f64, f64)> = report
            .rows_for(variant)
            .iter()
            .map(|r| (r.n as f64, r.median_us))
            .collect();
        let label = match slopes.iter().find(|s| s.0 == variant) {
            Some((_, s)) => format!("{variant} (slope {s:.2})"),
            None => variant.to_string(),
        };
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()?;
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let quad: Vec<(f64, f64)> = [128.0, 256.0, 512.0].iter().map(|&n| (n, 3.0 * n * n)).collect();
        assert!((loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = [10.0, 20.0].iter().map(|&n| (n, 0.5 * n)).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-12);
        assert!(loglog_slope(&[(4.0, 1.0)]).is_none());
        assert!(loglog_slope(&[(4.0, 1.0), (8.0, 0.0)]).is_none());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("quadratic".parse::<Variant>().is_err());
    }

    #[test]
    fn identity_projection_gate_holds() {
        for seed in 0..3 {
            assert!(identity_gate(24, 2, seed).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_setup() {
        assert!(bench_attention(&[Variant::Full], &[16], 4, 1, 5, 0).is_err());
        assert!(bench_attention(&[], &[16], 4, 1, 10, 0).is_err());
        assert!(bench_attention(&[Variant::Full], &[0], 4, 1, 10, 0).is_err());
    }
}

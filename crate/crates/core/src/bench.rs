//! Wall-clock timing of compacted low-rank layers `y = P′(Q′x)` in 32-bit floats.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Record;

/// Relative spread above which a measurement is flagged.
pub const UNSTABLE_CV: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub trials: usize,
    pub warmup: usize,
    /// Worker threads splitting the batch; 1 keeps the loop single-threaded.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            trials: 30,
            warmup: 5,
            threads: 1,
            seed: 0,
        }
    }
}

/// Timing of one kept rank against the full-rank layer of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub d_out: usize,
    pub d_in: usize,
    pub batch: usize,
    pub full_rank: usize,
    pub kept_rank: usize,
    /// Seconds per forward.
    pub median: f64,
    pub std: f64,
    pub full_median: f64,
    pub speedup: f64,
    pub unstable: bool,
}

impl BenchResult {
    pub fn rank_reduction(&self) -> f64 {
        1.0 - self.kept_rank as f64 / self.full_rank as f64
    }

    pub fn to_record(&self) -> Result<Record> {
        let mut r = Record::new();
        r.int("d_out", self.d_out as u64);
        r.int("d_in", self.d_in as u64);
        r.int("batch", self.batch as u64);
        r.int("full_rank", self.full_rank as u64);
        r.int("kept_rank", self.kept_rank as u64);
        r.num("median_ms", self.median * 1e3)?;
        r.num("std_ms", self.std * 1e3)?;
        r.num("full_median_ms", self.full_median * 1e3)?;
        r.num("speedup", self.speedup)?;
        r.text("unstable", if self.unstable { "yes" } else { "no" });
        Ok(r)
    }
}

/// Median and population standard deviation.
pub fn median_std(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (median, var.sqrt())
}

/// Dense `P′ (d_out×k)` and `Q′ (k×d_in)`, row-major, applied to column
/// blocks `x (d_in×batch)`.
pub struct LowRankKernel {
    p: Vec<f32>,
    q: Vec<f32>,
    d_out: usize,
    d_in: usize,
    k: usize,
}

impl LowRankKernel {
    pub fn seeded(d_out: usize, d_in: usize, k: usize, seed: u64) -> Self {
        Self::random(d_out, d_in, k, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn random(d_out: usize, d_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut fill = |n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
        LowRankKernel {
            p: fill(d_out * k),
            q: fill(k * d_in),
            d_out,
            d_in,
            k,
        }
    }

    /// Columns `[c0, c0 + n)` of the batch; `ld` is the full batch width.
    ///
    /// # Safety
    /// The three buffers must hold `d_in×ld`, `k×ld` and `d_out×ld` floats and
    /// no other thread may touch the same columns of `h` or `y`.
    unsafe fn forward_cols(&self, x: *const f32, h: *mut f32, y: *mut f32, ld: usize, c0: usize, n: usize) {
        let ld = ld as isize;
        matrixmultiply::sgemm(
            self.k,
            self.d_in,
            n,
            1.0,
            self.q.as_ptr(),
            self.d_in as isize,
            1,
            x.add(c0),
            ld,
            1,
            0.0,
            h.add(c0),
            ld,
            1,
        );
        matrixmultiply::sgemm(
            self.d_out,
            self.k,
            n,
            1.0,
            self.p.as_ptr(),
            self.k as isize,
            1,
            h.add(c0),
            ld,
            1,
            0.0,
            y.add(c0),
            ld,
            1,
        );
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    /// `y = P′(Q′x)` using `h` as the `k×batch` intermediate.
    ///
    /// # Panics
    /// If a buffer is shorter than its `rows × batch` extent.
    pub fn forward(&self, x: &[f32], h: &mut [f32], y: &mut [f32], batch: usize, threads: usize) {
        assert!(x.len() >= self.d_in * batch && h.len() >= self.k * batch && y.len() >= self.d_out * batch);
        if threads <= 1 || batch < 2 {
            unsafe { self.forward_cols(x.as_ptr(), h.as_mut_ptr(), y.as_mut_ptr(), batch, 0, batch) };
            return;
        }
        let per = batch.div_ceil(threads);
        let (xp, hp, yp) = (SendPtr(x.as_ptr() as *mut f32), SendPtr(h.as_mut_ptr()), SendPtr(y.as_mut_ptr()));
        std::thread::scope(|s| {
            for c0 in (0..batch).step_by(per) {
                let n = per.min(batch - c0);
                s.spawn(move || {
                    let (xp, hp, yp) = (xp, hp, yp);
                    // Disjoint column ranges; each output entry has one writer.
                    unsafe { self.forward_cols(xp.0, hp.0, yp.0, batch, c0, n) };
                });
            }
        });
    }
}

#[derive(Clone, Copy)]
struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}

fn time_layer(layer: &LowRankKernel, x: &[f32], batch: usize, opts: &BenchOptions) -> Vec<f64> {
    let mut h = vec![0.0f32; layer.k * batch];
    let mut y = vec![0.0f32; layer.d_out * batch];
    for _ in 0..opts.warmup {
        layer.forward(x, &mut h, &mut y, batch, opts.threads);
    }
    (0..opts.trials)
        .map(|_| {
            let t = Instant::now();
            layer.forward(black_box(x), &mut h, &mut y, batch, opts.threads);
            black_box(&y);
            t.elapsed().as_secs_f64()
        })
        .collect()
}

/// Times the full-rank layer and each kept rank on the same input.
pub fn bench_compacted(
    d_out: usize,
    d_in: usize,
    r_full: usize,
    kept_ranks: &[usize],
    batch: usize,
    opts: &BenchOptions,
) -> Result<Vec<BenchResult>> {
    if d_out == 0 || d_in == 0 || r_full == 0 || batch == 0 {
        return Err(Error::Invalid("bench shapes must be positive".into()));
    }
    if let Some(&k) = kept_ranks.iter().find(|&&k| k == 0 || k > r_full) {
        return Err(Error::Invalid(format!("kept rank {k} outside 1..={r_full}")));
    }
    if opts.trials < 30 || opts.threads == 0 {
        return Err(Error::Invalid("bench needs at least 30 trials and one thread".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x: Vec<f32> = (0..d_in * batch).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let full = LowRankKernel::random(d_out, d_in, r_full, &mut rng);
    let (full_median, full_std) = median_std(&time_layer(&full, &x, batch, opts));
    if full_median < 1e-3 {
        log::warn!("full-rank forward takes {:.3} ms; timings below 1 ms are noisy", full_median * 1e3);
    }
    let mut out = Vec::with_capacity(kept_ranks.len());
    for &k in kept_ranks {
        let (median, std) = if k == r_full {
            (full_median, full_std)
        } else {
            median_std(&time_layer(&LowRankKernel::random(d_out, d_in, k, &mut rng), &x, batch, opts))
        };
        let unstable = std > UNSTABLE_CV * median || full_std > UNSTABLE_CV * full_median;
        if unstable {
            log::warn!("rank {k}: timing spread above {:.0}% of the median; rerun on a quieter machine", UNSTABLE_CV * 100.0);
        }
        out.push(BenchResult {
            d_out,
            d_in,
            batch,
            full_rank: r_full,
            kept_rank: k,
            median,
            std,
            full_median,
            speedup: full_median / median,
            unstable,
        });
    }
    Ok(out)
}

/// Whether time does not increase as the kept rank grows smaller, allowing
/// `slack` relative noise between neighbours.
pub fn monotone_in_rank(results: &[BenchResult], slack: f64) -> bool {
    let mut r: Vec<&BenchResult> = results.iter().collect();
    r.sort_by_key(|b| b.kept_rank);
    r.windows(2).all(|w| w[0].median <= w[1].median * (1.0 + slack))
}

pub fn bench_table(results: &[BenchResult]) -> String {
    let mut out = format!(
        "{:>6} {:>6} {:>6} {:>6} {:>6} {:>10} {:>9} {:>8} {:>9}\n",
        "d_out", "d_in", "batch", "rank", "kept", "median_ms", "std_ms", "speedup", "unstable"
    );
    for b in results {
        out.push_str(&format!(
            "{:>6} {:>6} {:>6} {:>6} {:>6} {:>10.3} {:>9.3} {:>7.2}x {:>9}\n",
            b.d_out,
            b.d_in,
            b.batch,
            b.full_rank,
            b.kept_rank,
            b.median * 1e3,
            b.std * 1e3,
            b.speedup,
            if b.unstable { "yes" } else { "no" }
        ));
    }
    out
}

//! Wall-clock comparison of generation systems.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::sampling::{generate, Clock, SamplerConfig};
use crate::source::LatentSequence;
use crate::tensor::Scalar;

pub struct BenchSystem<'a, T: Scalar> {
    pub name: String,
    pub model: &'a Model<T>,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmups: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            runs: 20,
            warmups: 3,
        }
    }
}

/// Median timings of one system across runs, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub system: String,
    pub head_kind: String,
    pub steps: usize,
    pub frames: usize,
    pub wall: f64,
    pub head: f64,
    pub backbone: f64,
    pub overall_speedup: f64,
    pub sampler_speedup: f64,
    /// Percentage of wall time spent in the sampler head.
    pub sampler_share: f64,
    pub rtf: f64,
    pub fad: Option<f64>,
}

impl BenchRow {
    /// Row from totals, speedups relative to itself.
    pub fn from_times(
        system: &str,
        frames: usize,
        wall: f64,
        head: f64,
        generated_seconds: f64,
    ) -> Self {
        BenchRow {
            system: system.into(),
            head_kind: String::new(),
            steps: 0,
            frames,
            wall,
            head,
            backbone: 0.0,
            overall_speedup: 1.0,
            sampler_speedup: 1.0,
            sampler_share: 100.0 * head / wall,
            rtf: generated_seconds / wall,
            fad: None,
        }
    }

    pub fn head_per_frame(&self) -> f64 {
        self.head / self.frames.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub baseline: String,
    pub rows: Vec<BenchRow>,
}

pub const COLUMNS: [&str; 8] = [
    "system",
    "head",
    "steps",
    "overall_speedup",
    "sampler_speedup",
    "pct_time_in_sampler",
    "rtf",
    "fad",
];

const HEADERS: [&str; 6] = [
    "System",
    "Overall Speedup",
    "Sampler Speedup",
    "% time in Sampler",
    "RTF",
    "FAD",
];

impl BenchReport {
    /// Fill speedups relative to the row named `baseline`.
    pub fn new(baseline: &str, mut rows: Vec<BenchRow>) -> Result<Self> {
        let base = rows
            .iter()
            .find(|r| r.system == baseline)
            .cloned()
            .ok_or_else(|| Error::UnknownSystem(baseline.into()))?;
        for r in &mut rows {
            r.overall_speedup = base.wall / r.wall;
            r.sampler_speedup = base.head / r.head;
        }
        Ok(BenchReport {
            baseline: baseline.into(),
            rows,
        })
    }

    pub fn row(&self, system: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn set_fad(&mut self, system: &str, fad: f64) -> Result<()> {
        let r = self
            .rows
            .iter_mut()
            .find(|r| r.system == system)
            .ok_or_else(|| Error::UnknownSystem(system.into()))?;
        r.fad = Some(fad);
        Ok(())
    }

    fn cells(r: &BenchRow) -> [String; 6] {
        [
            r.system.clone(),
            format!("{:.2}", r.overall_speedup),
            format!("{:.2}", r.sampler_speedup),
            format!("{:.1}", r.sampler_share),
            format!("{:.2}", r.rtf),
            r.fad
                .map_or_else(|| String::from("-"), |f| format!("{f:.4}")),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let c = Self::cells(r);
            let fad = r.fad.map_or_else(String::new, |f| format!("{f}"));
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c[0],
                r.head_kind,
                r.steps,
                r.overall_speedup,
                r.sampler_speedup,
                r.sampler_share,
                r.rtf,
                fad
            ));
        }
        s
    }

    /// Aligned text table; numbers right-aligned.
    pub fn render(&self) -> String {
        let body: Vec<[String; 6]> = self.rows.iter().map(Self::cells).collect();
        let mut widths: [usize; 6] = core::array::from_fn(|i| HEADERS[i].len());
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i == 0 {
                    s.push_str(&format!("{:<w$}", c, w = widths[0]));
                } else {
                    s.push_str(&format!("  {:>w$}", c, w = widths[i]));
                }
            }
            s.push('\n');
            s
        };
        let head: Vec<String> = HEADERS.iter().map(|h| String::from(*h)).collect();
        let mut out = line(&head);
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row));
        }
        out
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Generate every prompt with every system `warmups + runs` times and keep
/// the medians of the timed runs. The first system is the baseline.
pub fn bench<T: Scalar>(
    systems: &[BenchSystem<'_, T>],
    prompts: &[LatentSequence],
    opts: BenchOptions,
    clock: &dyn Clock,
) -> Result<BenchReport> {
    if systems.is_empty() || prompts.is_empty() || opts.runs == 0 {
        return Err(Error::InvalidConfig(
            "bench needs systems, prompts and runs".into(),
        ));
    }
    let mut rows = Vec::with_capacity(systems.len());
    let mut frame_count: Option<usize> = None;
    for sys in systems {
        let (mut walls, mut heads, mut bbs, mut rtfs) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut frames = 0;
        for run in 0..opts.warmups + opts.runs {
            let (mut wall, mut head, mut bb, mut secs) = (0.0, 0.0, 0.0, 0.0);
            frames = 0;
            for p in prompts {
                let t = generate(sys.model, p, &sys.sampler, None, clock)?;
                let st = t.stage_totals();
                wall += t.wall;
                head += st.head;
                bb += st.backbone;
                secs += t.frames.duration();
                frames += t.frames.len();
            }
            if run >= opts.warmups {
                walls.push(wall);
                heads.push(head);
                bbs.push(bb);
                rtfs.push(secs / wall);
            }
        }
        match frame_count {
            None => frame_count = Some(frames),
            Some(f) if f != frames => {
                return Err(Error::InvalidConfig(format!(
                    "system {} generated {frames} frames, expected {f}",
                    sys.name
                )))
            }
            _ => {}
        }
        let shares: Vec<f64> = heads
            .iter()
            .zip(&walls)
            .map(|(h, w)| 100.0 * h / w)
            .collect();
        rows.push(BenchRow {
            system: sys.name.clone(),
            head_kind: sys.sampler.head.name().into(),
            steps: sys.sampler.steps,
            frames,
            wall: median(&mut walls),
            head: median(&mut heads),
            backbone: median(&mut bbs),
            overall_speedup: 1.0,
            sampler_speedup: 1.0,
            sampler_share: median(&mut shares.clone()),
            rtf: median(&mut rtfs),
            fad: None,
        });
    }
    BenchReport::new(&systems[0].name, rows)
}

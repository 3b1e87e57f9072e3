//! Per-layer timing of the packed engine and the full-precision baseline.
//!
//! Images are generated before the clock starts; each sample is timed from
//! the call into the forward pass to the completion of its last stage.

use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use crate::baseline::FloatNetwork;
use crate::engine::{argmax, stages, Engine, Probe, Stage};
use crate::error::{Error, Result};
use crate::model::ModelDescriptor;
use crate::preproc;

/// Mean and sample standard deviation, in microseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub mean_us: f64,
    pub std_us: f64,
}

impl Timing {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Timing {
            mean_us: mean,
            std_us: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTiming {
    pub stage: Stage,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// `"binarized"` or `"baseline"`.
    pub label: &'static str,
    pub samples: usize,
    pub seed: u64,
    pub total: Timing,
    pub stages: Vec<StageTiming>,
    /// Predicted class of every sample.
    pub classes: Vec<usize>,
}

/// Build profile and target of the running binary.
pub fn platform_note() -> String {
    format!(
        "{}-{}, debug assertions {}, popcnt {}, avx2 {}, single thread",
        std::env::consts::ARCH,
        std::env::consts::OS,
        on_off(cfg!(debug_assertions)),
        on_off(crate::bitops::has_hw_popcount()),
        on_off(crate::bitops::has_avx2()),
    )
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

struct StageClock {
    last: Instant,
    /// `[sample][stage]` in microseconds.
    times: Vec<f64>,
}

impl Probe for StageClock {
    #[inline]
    fn stage_done(&mut self, _stage: usize) {
        let now = Instant::now();
        self.times.push(micros(now - self.last));
        self.last = now;
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn run(
    label: &'static str,
    model: &ModelDescriptor,
    samples: usize,
    seed: u64,
    mut forward: impl FnMut(&preproc::Image, &mut StageClock) -> Result<usize>,
) -> Result<BenchReport> {
    if samples == 0 {
        return Err(Error::param("samples must be at least 1"));
    }
    let stage_list = stages(model);
    let n_stages = stage_list.len();
    let shape = model.input_shape();
    let mut per_stage = vec![Vec::with_capacity(samples); n_stages];
    let mut totals = Vec::with_capacity(samples);
    let mut classes = Vec::with_capacity(samples);
    let mut clock = StageClock {
        last: Instant::now(),
        times: Vec::with_capacity(n_stages),
    };
    for i in 0..samples {
        let image = preproc::seeded_image(seed, i as u64, shape);
        clock.times.clear();
        let start = Instant::now();
        clock.last = start;
        let class = forward(&image, &mut clock)?;
        totals.push(micros(clock.last - start));
        assert_eq!(clock.times.len(), n_stages, "probe missed a stage");
        for (acc, &t) in per_stage.iter_mut().zip(&clock.times) {
            acc.push(t);
        }
        classes.push(class);
    }
    Ok(BenchReport {
        label,
        samples,
        seed,
        total: Timing::from_samples(&totals),
        stages: stage_list
            .into_iter()
            .zip(&per_stage)
            .map(|(stage, ts)| StageTiming {
                stage,
                timing: Timing::from_samples(ts),
            })
            .collect(),
        classes,
    })
}

/// Times the packed engine on `samples` seeded random images.
pub fn bench_packed(
    engine: &Engine,
    model: &ModelDescriptor,
    samples: usize,
    seed: u64,
) -> Result<BenchReport> {
    run("binarized", model, samples, seed, |img, clock| {
        Ok(engine.forward_probed(model, img, clock)?.class)
    })
}

/// Times the full-precision baseline on the same images.
pub fn bench_baseline(model: &ModelDescriptor, samples: usize, seed: u64) -> Result<BenchReport> {
    let net = FloatNetwork::new(model);
    run("baseline", model, samples, seed, |img, clock| {
        Ok(argmax(&net.forward_probed(img, clock)?))
    })
}

/// Packed timings next to baseline timings. Ratios are baseline time over
/// packed time, so values above 1 mean the packed path is faster.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub packed: BenchReport,
    pub baseline: BenchReport,
    pub stage_speedups: Vec<f64>,
    pub total_speedup: f64,
    /// Samples on which both paths predict the same class.
    pub class_agreement: usize,
}

impl Comparison {
    pub fn new(packed: BenchReport, baseline: BenchReport) -> Result<Self> {
        if packed.samples != baseline.samples || packed.stages.len() != baseline.stages.len() {
            return Err(Error::param("reports cover different runs"));
        }
        let stage_speedups = packed
            .stages
            .iter()
            .zip(&baseline.stages)
            .map(|(p, b)| b.timing.mean_us / p.timing.mean_us)
            .collect();
        let class_agreement = packed
            .classes
            .iter()
            .zip(&baseline.classes)
            .filter(|(a, b)| a == b)
            .count();
        Ok(Comparison {
            total_speedup: baseline.total.mean_us / packed.total.mean_us,
            packed,
            baseline,
            stage_speedups,
            class_agreement,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "stage,binarized_mean_us,binarized_std_us,baseline_mean_us,baseline_std_us,speedup\n",
        );
        for ((p, b), r) in self.packed.stages.iter().zip(&self.baseline.stages).zip(&self.stage_speedups) {
            let _ = writeln!(
                s,
                "\"{}\",{:.3},{:.3},{:.3},{:.3},{:.3}",
                p.stage.name, p.timing.mean_us, p.timing.std_us, b.timing.mean_us, b.timing.std_us, r
            );
        }
        let (p, b) = (self.packed.total, self.baseline.total);
        let _ = writeln!(
            s,
            "\"Whole network\",{:.3},{:.3},{:.3},{:.3},{:.3}",
            p.mean_us, p.std_us, b.mean_us, b.std_us, self.total_speedup
        );
        s
    }
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mean_us,std_us\n");
        for st in &self.stages {
            let _ = writeln!(s, "\"{}\",{:.3},{:.3}", st.stage.name, st.timing.mean_us, st.timing.std_us);
        }
        let _ = writeln!(s, "\"Whole network\",{:.3},{:.3}", self.total.mean_us, self.total.std_us);
        s
    }

    pub fn display(&self, layerwise: bool) -> impl fmt::Display + '_ {
        ReportView {
            report: self,
            layerwise,
        }
    }
}

fn us(t: Timing) -> String {
    format!("{:>10.1} ± {:<9.1}", t.mean_us, t.std_us)
}

fn name_width(stages: &[StageTiming]) -> usize {
    stages
        .iter()
        .map(|s| s.stage.name.chars().count())
        .max()
        .unwrap_or(0)
        .max("Whole network".len())
}

struct ReportView<'a> {
    report: &'a BenchReport,
    layerwise: bool,
}

impl fmt::Display for ReportView<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.report;
        writeln!(
            f,
            "{} path: {} samples, seed {}, {}",
            r.label,
            r.samples,
            r.seed,
            platform_note()
        )?;
        let w = name_width(&r.stages);
        writeln!(f, "{:<w$}  {:>22}", "stage", "mean ± std (µs)")?;
        if self.layerwise {
            for s in &r.stages {
                writeln!(f, "{:<w$}  {}", s.stage.name, us(s.timing))?;
            }
        }
        write!(f, "{:<w$}  {}", "Whole network", us(r.total))
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} samples, seed {}, {}",
            self.packed.samples,
            self.packed.seed,
            platform_note()
        )?;
        let w = name_width(&self.packed.stages);
        writeln!(
            f,
            "{:<w$}  {:>22}  {:>22}  {:>8}",
            "stage", "binarized (µs)", "float baseline (µs)", "speedup"
        )?;
        for ((p, b), r) in self.packed.stages.iter().zip(&self.baseline.stages).zip(&self.stage_speedups) {
            writeln!(
                f,
                "{:<w$}  {}  {}  {:>7.2}x",
                p.stage.name,
                us(p.timing),
                us(b.timing),
                r
            )?;
        }
        writeln!(
            f,
            "{:<w$}  {}  {}  {:>7.2}x",
            "Whole network",
            us(self.packed.total),
            us(self.baseline.total),
            self.total_speedup
        )?;
        write!(
            f,
            "class agreement {}/{}",
            self.class_agreement, self.packed.samples
        )
    }
}

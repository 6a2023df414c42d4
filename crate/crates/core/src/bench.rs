//! Parameter counts, intermediate sizes and wall-clock throughput of the
//! fusion operators.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Fusion, McbParams, MfbParams, MlbParams, NormConfig};
use crate::session::Session;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Mfb,
    Mlb,
    Mcb,
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfb" => Ok(Operator::Mfb),
            "mlb" => Ok(Operator::Mlb),
            "mcb" => Ok(Operator::Mcb),
            other => Err(Error::Config(format!("unknown bench operator {other:?}"))),
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::Mfb => "mfb",
            Operator::Mlb => "mlb",
            Operator::Mcb => "mcb",
        })
    }
}

/// One point of a bench grid. `k` and `o` are ignored by MCB, `d` by the
/// factorized operators, and MLB always uses `k = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchDims {
    pub operator: Operator,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub o: usize,
    pub d: usize,
}

impl BenchDims {
    pub fn mfb(m: usize, n: usize, k: usize, o: usize) -> Self {
        BenchDims {
            operator: Operator::Mfb,
            m,
            n,
            k,
            o,
            d: 0,
        }
    }

    pub fn mlb(m: usize, n: usize, o: usize) -> Self {
        BenchDims {
            operator: Operator::Mlb,
            m,
            n,
            k: 1,
            o,
            d: 0,
        }
    }

    pub fn mcb(m: usize, n: usize, d: usize) -> Self {
        BenchDims {
            operator: Operator::Mcb,
            m,
            n,
            k: 0,
            o: 0,
            d,
        }
    }

    fn canonical(self) -> Self {
        match self.operator {
            Operator::Mfb => BenchDims { d: 0, ..self },
            Operator::Mlb => BenchDims { k: 1, d: 0, ..self },
            Operator::Mcb => BenchDims { k: 0, o: 0, ..self },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.m > 0
            && self.n > 0
            && match self.operator {
                Operator::Mfb => self.k > 0 && self.o > 0,
                Operator::Mlb => self.o > 0,
                Operator::Mcb => self.d > 0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid bench dims {self:?}")))
        }
    }

    pub fn projection_param_count(&self) -> usize {
        match self.operator {
            Operator::Mfb => (self.m + self.n) * self.k * self.o,
            Operator::Mlb => (self.m + self.n) * self.o,
            Operator::Mcb => 0,
        }
    }

    pub fn intermediate_dim(&self) -> usize {
        match self.operator {
            Operator::Mfb => self.k * self.o,
            Operator::Mlb => self.o,
            Operator::Mcb => self.d,
        }
    }

    /// Live `f64` elements of one forward pass at `batch` rows, times 8:
    /// inputs, projection weights and every intermediate the operator
    /// materializes (FFT buffers count twice for their complex parts).
    pub fn peak_bytes_estimate(&self, batch: usize) -> usize {
        let inputs = batch * (self.m + self.n);
        let live = match self.operator {
            Operator::Mfb => {
                let w = self.k * self.o;
                3 * batch * w + batch * self.o
            }
            Operator::Mlb => 3 * batch * self.o,
            Operator::Mcb => 3 * batch * self.d + 3 * 2 * self.d,
        };
        8 * (inputs + self.projection_param_count() + live)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub operator: Operator,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub o: usize,
    pub d: usize,
    pub projection_param_count: usize,
    pub intermediate_dim: usize,
    pub forward_ns_per_call: f64,
    pub backward_ns_per_call: f64,
    pub peak_bytes_estimate: usize,
}

pub const CSV_HEADER: [&str; 11] = [
    "operator",
    "m",
    "n",
    "k",
    "o",
    "d",
    "projection_param_count",
    "intermediate_dim",
    "forward_ns_per_call",
    "backward_ns_per_call",
    "peak_bytes_estimate",
];

impl BenchResult {
    fn counts(dims: BenchDims, batch: usize) -> Self {
        let dims = dims.canonical();
        BenchResult {
            operator: dims.operator,
            m: dims.m,
            n: dims.n,
            k: dims.k,
            o: dims.o,
            d: dims.d,
            projection_param_count: dims.projection_param_count(),
            intermediate_dim: dims.intermediate_dim(),
            forward_ns_per_call: 0.0,
            backward_ns_per_call: 0.0,
            peak_bytes_estimate: dims.peak_bytes_estimate(batch),
        }
    }
}

/// Closed-form counts for every grid point; timing columns are zero and the
/// memory estimate assumes a single row.
pub fn param_report(grid: &[BenchDims]) -> Vec<BenchResult> {
    grid.iter().map(|&d| BenchResult::counts(d, 1)).collect()
}

/// Builds the parameter record of an operator so its elements can be
/// counted directly.
pub fn build_fusion(dims: BenchDims, seed: u64) -> Result<Fusion> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match dims.operator {
        Operator::Mfb => Fusion::Mfb(MfbParams::random(
            dims.m, dims.n, dims.k, dims.o, 0.0, &mut rng,
        )?),
        Operator::Mlb => Fusion::Mlb(MlbParams::random(dims.m, dims.n, dims.o, 0.0, &mut rng)?),
        Operator::Mcb => Fusion::Mcb(McbParams::new(dims.m, dims.n, dims.d, seed, 0.0)?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            batch: 32,
            repetitions: 20,
            warmup: 5,
            seed: 0,
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn run_once(f: &Fusion, x: &Tensor, y: &Tensor, weights: &Tensor, backward: bool) -> Result<()> {
    let mut s = Session::eval();
    let xv = s.input(x.clone());
    let yv = s.input(y.clone());
    let out = f.module(&mut s, xv, yv, NormConfig::default())?.out;
    if backward {
        let w = s.input(weights.clone());
        let p = s.tape.mul(out, w)?;
        let loss = s.tape.sum(p);
        std::hint::black_box(s.tape.backward(loss)?);
    } else {
        std::hint::black_box(s.value(out));
    }
    Ok(())
}

fn time_mode(
    f: &Fusion,
    x: &Tensor,
    y: &Tensor,
    weights: &Tensor,
    backward: bool,
    t: &Timing,
) -> Result<f64> {
    for _ in 0..t.warmup {
        run_once(f, x, y, weights, backward)?;
    }
    let mut samples = Vec::with_capacity(t.repetitions);
    for _ in 0..t.repetitions {
        let start = Instant::now();
        run_once(f, x, y, weights, backward)?;
        samples.push(start.elapsed().as_nanos() as f64);
    }
    Ok(median(&mut samples))
}

/// Median wall-clock time of the normalized fusion module on a batch of
/// seeded random inputs, forward only and forward plus backward.
pub fn throughput(dims: BenchDims, t: &Timing) -> Result<BenchResult> {
    if t.repetitions == 0 || t.batch == 0 {
        return Err(Error::Config(
            "bench needs repetitions >= 1 and batch >= 1".into(),
        ));
    }
    let f = build_fusion(dims, t.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(1));
    let x = Tensor::uniform(&[t.batch, dims.m], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[t.batch, dims.n], -1.0, 1.0, &mut rng);
    let weights = Tensor::uniform(&[t.batch, f.out_dim()], -1.0, 1.0, &mut rng);
    let mut r = BenchResult::counts(dims, t.batch);
    r.forward_ns_per_call = time_mode(&f, &x, &y, &weights, false, t)?;
    r.backward_ns_per_call = time_mode(&f, &x, &y, &weights, true, t)?;
    Ok(r)
}

/// Default grid: the full-scale MFB, MLB and MCB configurations.
pub fn default_grid() -> Vec<BenchDims> {
    vec![
        BenchDims::mfb(2048, 2048, 5, 1000),
        BenchDims::mlb(2048, 2048, 1000),
        BenchDims::mcb(2048, 2048, 16000),
    ]
}

pub fn write_csv<W: io::Write>(w: W, rows: &[BenchResult]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(r: R) -> Result<Vec<BenchResult>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != CSV_HEADER {
        return Err(Error::Input(format!(
            "unexpected bench CSV header {header:?}"
        )));
    }
    rd.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("bench CSV: {e}"))
}

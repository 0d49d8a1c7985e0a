//! Binary checkpoints: little-endian, length-prefixed records.
//!
//! Layout: magic, version, precision byte, the run config as TOML, the
//! vocabulary, the model records and an optional training-state block.
//! Model tensors are stored at the configured precision; optimizer buffers,
//! recurrent state and controller state are always stored as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::controller::{AgpScheduler, LagrangianController};
use crate::error::{Error, Result};
use crate::gate::{GateConfig, HardConcreteGate, KeptValue};
use crate::graph::{Param, ParamGroup};
use crate::layers::embedding::{AdaptiveEmbedding, Cluster, Embedding};
use crate::layers::linear::{ColumnGatedLinear, CompactedColumns, CompactedLinear, FactorizedLinear, Linear};
use crate::layers::{MagnitudeMask, Mask};
use crate::lm::corpus::{Batcher, Vocabulary};
use crate::lm::model::{Cell, Method, RecurrentLM};
use crate::lm::train::{SizeControl, TrainState};
use crate::optim::Slot;
use crate::tensor::{Precision, Tensor};

const MAGIC: &[u8; 8] = b"FLOPCKPT";
const VERSION: u8 = 1;

/// A saved run: its config, vocabulary, model and, between phases, training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: RecurrentLM,
    pub train: Option<TrainState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut w = Enc {
            out,
            precision: self.config.precision,
        };
        w.out.write_all(MAGIC)?;
        w.u8(VERSION)?;
        w.u8(match self.config.precision {
            Precision::F64 => 0,
            Precision::F32 => 1,
        })?;
        w.str(&self.config.render()?)?;
        w.len(self.vocab.symbols().len())?;
        for &s in self.vocab.symbols() {
            w.out.write_u32::<LE>(s)?;
        }
        w.model(&self.model)?;
        match &self.train {
            None => w.u8(0)?,
            Some(t) => {
                w.u8(1)?;
                w.train(t)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut r = Dec {
            input,
            precision: Precision::F64,
        };
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        r.precision = match r.u8()? {
            0 => Precision::F64,
            1 => Precision::F32,
            b => return Err(Error::Checkpoint(format!("bad precision tag {b}"))),
        };
        let config = RunConfig::parse(&r.str()?)?;
        let n = r.len()?;
        let symbols = (0..n).map(|_| r.input.read_u32::<LE>().map_err(eof)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_symbols(symbols);
        let model = r.model()?;
        let train = match r.u8()? {
            0 => None,
            1 => Some(r.train()?),
            b => return Err(Error::Checkpoint(format!("bad train-state tag {b}"))),
        };
        Ok(Checkpoint {
            config,
            vocab,
            model,
            train,
        })
    }
}

fn eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Io(e)
    }
}

fn tag_err(what: &str, tag: u8) -> Error {
    Error::Checkpoint(format!("unknown {what} tag {tag}"))
}

struct Enc<'a, W: Write> {
    out: &'a mut W,
    precision: Precision,
}

impl<W: Write> Enc<'_, W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.out.write_u8(v)?)
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.out.write_u64::<LE>(v)?)
    }

    fn len(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.out.write_f64::<LE>(v)?)
    }

    fn bool(&mut self, v: bool) -> Result<()> {
        self.u8(v as u8)
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        Ok(self.out.write_all(s.as_bytes())?)
    }

    fn usizes(&mut self, v: &[usize]) -> Result<()> {
        self.len(v.len())?;
        v.iter().try_for_each(|&x| self.len(x))
    }

    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.len(v.len())?;
        v.iter().try_for_each(|&x| self.f64(x))
    }

    /// Always full precision.
    fn tensor64(&mut self, t: &Tensor) -> Result<()> {
        self.usizes(t.shape())?;
        t.data().iter().try_for_each(|&x| self.f64(x))
    }

    /// At the checkpoint's storage precision.
    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.usizes(t.shape())?;
        match self.precision {
            Precision::F64 => t.data().iter().try_for_each(|&x| self.f64(x)),
            Precision::F32 => t.data().iter().try_for_each(|&x| Ok(self.out.write_f32::<LE>(x as f32)?)),
        }
    }

    fn param(&mut self, p: &Param) -> Result<()> {
        self.str(&p.name)?;
        self.bool(p.trainable)?;
        self.u8(match p.group {
            ParamGroup::Weight => 0,
            ParamGroup::Gate => 1,
        })?;
        self.tensor(&p.value)
    }

    fn opt_param(&mut self, p: Option<&Param>) -> Result<()> {
        match p {
            None => self.u8(0),
            Some(p) => {
                self.u8(1)?;
                self.param(p)
            }
        }
    }

    fn gate_config(&mut self, c: &GateConfig) -> Result<()> {
        for v in [c.l, c.r, c.beta, c.init_alpha, c.init_jitter] {
            self.f64(v)?;
        }
        self.u8(match c.kept_value {
            KeptValue::RectifiedMean => 0,
            KeptValue::OpenProbability => 1,
            KeptValue::One => 2,
        })
    }

    fn mask(&mut self, m: &Mask) -> Result<()> {
        match m {
            Mask::None => self.u8(0),
            Mask::HardConcrete(g) => {
                self.u8(1)?;
                self.gate_config(&g.config)?;
                self.usizes(&g.block_sizes)?;
                self.param(&g.alpha)
            }
            Mask::Magnitude(mm) => {
                self.u8(2)?;
                self.usizes(&mm.block_sizes)?;
                self.len(mm.pruned.len())?;
                mm.pruned.iter().try_for_each(|&p| self.bool(p))?;
                self.param(&mm.values)
            }
        }
    }

    fn linear(&mut self, l: &Linear) -> Result<()> {
        match l {
            Linear::Factorized(f) => {
                self.u8(0)?;
                self.param(&f.p)?;
                self.param(&f.q)?;
                self.opt_param(f.bias.as_ref())?;
                self.mask(&f.mask)
            }
            Linear::Column(c) => {
                self.u8(1)?;
                self.param(&c.w)?;
                self.opt_param(c.bias.as_ref())?;
                self.mask(&c.mask)
            }
            Linear::Compact(c) => {
                self.u8(2)?;
                self.param(&c.p)?;
                self.param(&c.q)?;
                self.opt_param(c.bias.as_ref())
            }
            Linear::CompactColumns(c) => {
                self.u8(3)?;
                self.param(&c.w)?;
                self.usizes(&c.cols)?;
                self.len(c.d_in)?;
                self.opt_param(c.bias.as_ref())
            }
        }
    }

    fn model(&mut self, m: &RecurrentLM) -> Result<()> {
        match &m.embedding {
            Embedding::Plain(p) => {
                self.u8(0)?;
                self.param(p)?;
            }
            Embedding::Adaptive(a) => {
                self.u8(1)?;
                self.len(a.dim)?;
                self.len(a.clusters.len())?;
                for c in &a.clusters {
                    self.len(c.start)?;
                    self.len(c.end)?;
                    self.param(&c.e)?;
                    self.param(&c.o)?;
                    self.mask(&c.mask)?;
                }
            }
        }
        self.len(m.cells.len())?;
        for c in &m.cells {
            self.linear(&c.input)?;
            self.linear(&c.recurrent)?;
        }
        self.opt_param(m.output.as_ref())?;
        self.param(&m.output_bias)?;
        self.len(m.hidden)?;
        self.len(m.reference_total)
    }

    fn control(&mut self, c: &SizeControl) -> Result<()> {
        match c {
            SizeControl::None => self.u8(0),
            SizeControl::Lagrangian(l) => {
                self.u8(1)?;
                self.str(&json(l)?)
            }
            SizeControl::FixedL0 { coeff, prunable_total } => {
                self.u8(2)?;
                self.f64(*coeff)?;
                self.f64(*prunable_total)
            }
            SizeControl::Agp(a) => {
                self.u8(3)?;
                self.str(&json(a)?)
            }
        }
    }

    fn train(&mut self, t: &TrainState) -> Result<()> {
        self.str(t.method.as_str())?;
        self.u64(t.step)?;
        self.u64(t.warmup_steps)?;
        self.u64(t.total_steps)?;
        let b = &t.batcher;
        for v in [b.batch_size as u64, b.unroll as u64, b.cursor as u64, b.epoch] {
            self.u64(v)?;
        }
        self.len(t.state.len())?;
        t.state.iter().try_for_each(|s| self.tensor64(s))?;
        self.u64(t.optimizer_steps)?;
        self.len(t.slots.len())?;
        for s in &t.slots {
            match s {
                None => self.u8(0)?,
                Some(s) => {
                    self.u8(1)?;
                    self.f64s(&s.m)?;
                    self.f64s(&s.v)?;
                }
            }
        }
        self.control(&t.control)?;
        self.out.write_all(&t.rng.get_seed())?;
        self.u64(t.rng.get_stream())?;
        self.out.write_u128::<LE>(t.rng.get_word_pos())?;
        match t.best_valid {
            None => self.u8(0),
            Some(v) => {
                self.u8(1)?;
                self.f64(v)
            }
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn unjson<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))
}

struct Dec<'a, R: Read> {
    input: &'a mut R,
    precision: Precision,
}

impl<R: Read> Dec<'_, R> {
    fn u8(&mut self) -> Result<u8> {
        self.input.read_u8().map_err(eof)
    }

    fn u64(&mut self) -> Result<u64> {
        self.input.read_u64::<LE>().map_err(eof)
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit")))
    }

    /// A length that is also a count of at least `unit` following bytes.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.len()?;
        if n.checked_mul(unit).is_none_or(|b| b > (1 << 40)) {
            return Err(Error::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        self.input.read_f64::<LE>().map_err(eof)
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(tag_err("bool", b)),
        }
    }

    fn str(&mut self) -> Result<String> {
        let n = self.count(1)?;
        let mut buf = vec![0u8; n];
        self.input.read_exact(&mut buf).map_err(eof)?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.len()).collect()
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn shape(&mut self) -> Result<(Vec<usize>, usize)> {
        let shape = self.usizes()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n < (1 << 37))
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?}")))?;
        Ok((shape, n))
    }

    fn tensor64(&mut self) -> Result<Tensor> {
        let (shape, n) = self.shape()?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let (shape, n) = self.shape()?;
        let data = match self.precision {
            Precision::F64 => (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?,
            Precision::F32 => (0..n)
                .map(|_| self.input.read_f32::<LE>().map(f64::from).map_err(eof))
                .collect::<Result<Vec<_>>>()?,
        };
        Tensor::new(&shape, data)
    }

    fn param(&mut self) -> Result<Param> {
        let name = self.str()?;
        let trainable = self.bool()?;
        let group = match self.u8()? {
            0 => ParamGroup::Weight,
            1 => ParamGroup::Gate,
            b => return Err(tag_err("param group", b)),
        };
        let mut p = Param::new(name, self.tensor()?);
        p.trainable = trainable;
        p.group = group;
        Ok(p)
    }

    fn opt_param(&mut self) -> Result<Option<Param>> {
        match self.u8()? {
            0 => Ok(None),
            1 => self.param().map(Some),
            b => Err(tag_err("optional param", b)),
        }
    }

    fn gate_config(&mut self) -> Result<GateConfig> {
        let mut v = [0.0; 5];
        for x in &mut v {
            *x = self.f64()?;
        }
        let kept_value = match self.u8()? {
            0 => KeptValue::RectifiedMean,
            1 => KeptValue::OpenProbability,
            2 => KeptValue::One,
            b => return Err(tag_err("kept value", b)),
        };
        let c = GateConfig {
            l: v[0],
            r: v[1],
            beta: v[2],
            init_alpha: v[3],
            init_jitter: v[4],
            kept_value,
        };
        c.validate()?;
        Ok(c)
    }

    fn mask(&mut self) -> Result<Mask> {
        Ok(match self.u8()? {
            0 => Mask::None,
            1 => {
                let config = self.gate_config()?;
                let block_sizes = self.usizes()?;
                let alpha = self.param()?;
                let mut g = HardConcreteGate::with_alpha(alpha.name.clone(), alpha.value.data().to_vec(), block_sizes, config)?;
                g.alpha = alpha;
                Mask::HardConcrete(g)
            }
            2 => {
                let block_sizes = self.usizes()?;
                let n = self.count(1)?;
                let pruned = (0..n).map(|_| self.bool()).collect::<Result<Vec<_>>>()?;
                let values = self.param()?;
                if block_sizes.len() != n || values.value.numel() != n {
                    return Err(Error::Checkpoint("magnitude mask lengths disagree".into()));
                }
                Mask::Magnitude(MagnitudeMask {
                    values,
                    pruned,
                    block_sizes,
                })
            }
            b => return Err(tag_err("mask", b)),
        })
    }

    fn linear(&mut self) -> Result<Linear> {
        Ok(match self.u8()? {
            0 => {
                let p = self.param()?;
                let q = self.param()?;
                let bias = self.opt_param()?;
                let mask = self.mask()?;
                Linear::Factorized(FactorizedLinear::from_factors(p, q, bias, mask)?)
            }
            1 => {
                let w = self.param()?;
                let bias = self.opt_param()?;
                let mask = self.mask()?;
                if w.value.rank() != 2 || mask.components().is_some_and(|n| n != w.value.dims2().1) {
                    return Err(Error::Checkpoint(format!("column layer {} has a mismatched mask", w.name)));
                }
                Linear::Column(ColumnGatedLinear { w, bias, mask })
            }
            2 => {
                let p = self.param()?;
                let q = self.param()?;
                let bias = self.opt_param()?;
                if p.value.rank() != 2 || q.value.rank() != 2 || p.value.dims2().1 != q.value.dims2().0 {
                    return Err(Error::shape("CompactedLinear", p.value.shape(), q.value.shape()));
                }
                Linear::Compact(CompactedLinear { p, q, bias })
            }
            3 => {
                let w = self.param()?;
                let cols = self.usizes()?;
                let d_in = self.len()?;
                let bias = self.opt_param()?;
                if w.value.rank() != 2 || w.value.dims2().1 != cols.len() || cols.iter().any(|&c| c >= d_in) {
                    return Err(Error::Checkpoint(format!("compacted columns {} are inconsistent", w.name)));
                }
                Linear::CompactColumns(CompactedColumns { w, cols, d_in, bias })
            }
            b => return Err(tag_err("layer", b)),
        })
    }

    fn model(&mut self) -> Result<RecurrentLM> {
        let embedding = match self.u8()? {
            0 => Embedding::Plain(self.param()?),
            1 => {
                let dim = self.len()?;
                let n = self.count(1)?;
                let mut clusters = Vec::with_capacity(n);
                for _ in 0..n {
                    let start = self.len()?;
                    let end = self.len()?;
                    let e = self.param()?;
                    let o = self.param()?;
                    let mask = self.mask()?;
                    clusters.push(Cluster { start, end, e, o, mask });
                }
                Embedding::Adaptive(AdaptiveEmbedding { clusters, dim })
            }
            b => return Err(tag_err("embedding", b)),
        };
        let n = self.count(1)?;
        let cells = (0..n)
            .map(|_| {
                Ok(Cell {
                    input: self.linear()?,
                    recurrent: self.linear()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = self.opt_param()?;
        let output_bias = self.param()?;
        let hidden = self.len()?;
        let reference_total = self.len()?;
        Ok(RecurrentLM {
            embedding,
            cells,
            output,
            output_bias,
            hidden,
            reference_total,
        })
    }

    fn control(&mut self) -> Result<SizeControl> {
        Ok(match self.u8()? {
            0 => SizeControl::None,
            1 => SizeControl::Lagrangian(unjson::<LagrangianController>(&self.str()?)?),
            2 => SizeControl::FixedL0 {
                coeff: self.f64()?,
                prunable_total: self.f64()?,
            },
            3 => SizeControl::Agp(unjson::<AgpScheduler>(&self.str()?)?),
            b => return Err(tag_err("size control", b)),
        })
    }

    fn train(&mut self) -> Result<TrainState> {
        let method = Method::from_str(&self.str()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step = self.u64()?;
        let warmup_steps = self.u64()?;
        let total_steps = self.u64()?;
        let batcher = Batcher {
            batch_size: self.len()?,
            unroll: self.len()?,
            cursor: self.len()?,
            epoch: self.u64()?,
        };
        let n = self.count(8)?;
        let state = (0..n).map(|_| self.tensor64()).collect::<Result<Vec<_>>>()?;
        let optimizer_steps = self.u64()?;
        let n = self.count(1)?;
        let slots = (0..n)
            .map(|_| match self.u8()? {
                0 => Ok(None),
                1 => Ok(Some(Slot {
                    m: self.f64s()?,
                    v: self.f64s()?,
                })),
                b => Err(tag_err("slot", b)),
            })
            .collect::<Result<Vec<_>>>()?;
        let control = self.control()?;
        let mut seed = [0u8; 32];
        self.input.read_exact(&mut seed).map_err(eof)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.u64()?);
        rng.set_word_pos(self.input.read_u128::<LE>().map_err(eof)?);
        let best_valid = match self.u8()? {
            0 => None,
            1 => Some(self.f64()?),
            b => return Err(tag_err("best valid", b)),
        };
        Ok(TrainState {
            method,
            step,
            warmup_steps,
            total_steps,
            batcher,
            state,
            optimizer_steps,
            slots,
            control,
            rng,
            best_valid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::MaskMode;
    use crate::lm::{CharCorpus, Trainer};
    use crate::Graph;

    fn config(method: Method) -> RunConfig {
        let mut cfg = RunConfig { method, seed: 7, ..RunConfig::default() };
        cfg.model.embed_dim = 8;
        cfg.model.hidden = 8;
        cfg.model.layers = 1;
        cfg.train.steps = 20;
        cfg.train.batch_size = 2;
        cfg.train.unroll = 5;
        cfg.train.warmup_fraction = 0.25;
        cfg
    }

    fn corpus() -> CharCorpus {
        CharCorpus::from_bytes(b"the quick brown fox jumps over the lazy dog. ".repeat(20).as_slice(), Default::default(), Default::default())
            .unwrap()
    }

    fn logits(m: &RecurrentLM) -> Vec<f64> {
        let mut g = Graph::new();
        let b = m.bind(&mut g, &mut MaskMode::Deterministic).unwrap();
        let mut state = m.zero_state(1);
        let out = m.forward(&mut g, &b, &[1, 2, 3, 4], 1, &mut state).unwrap();
        g.value(out).data().to_vec()
    }

    fn params_bits(m: &RecurrentLM) -> Vec<(String, Vec<u64>)> {
        m.params().iter().map(|p| (p.name.clone(), p.value.data().iter().map(|x| x.to_bits()).collect())).collect()
    }

    #[test]
    fn model_round_trip_is_bit_identical_for_every_method() {
        let corpus = corpus();
        for method in Method::ALL {
            let cfg = config(method);
            let mut t = Trainer::new(&cfg, &corpus).unwrap();
            t.run_until(&corpus, 10, |_| Ok(())).unwrap();
            for model in [t.model.clone(), t.model.compact()] {
                let ck = Checkpoint {
                    config: cfg.clone(),
                    vocab: corpus.vocab.clone(),
                    model,
                    train: None,
                };
                let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
                assert_eq!(params_bits(&back.model), params_bits(&ck.model), "{method}");
                assert_eq!(logits(&back.model), logits(&ck.model));
                assert_eq!(back.model.count(), ck.model.count());
                assert_eq!(back.vocab, ck.vocab);
                assert_eq!(back.config, cfg);
            }
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let corpus = corpus();
        let dir = tempfile::tempdir().unwrap();
        for method in [Method::FlopL0, Method::FlopAgp] {
            let cfg = config(method);
            let mut straight = Trainer::new(&cfg, &corpus).unwrap();
            straight.run_until(&corpus, 16, |_| Ok(())).unwrap();

            let mut first = Trainer::new(&cfg, &corpus).unwrap();
            first.run_until(&corpus, 8, |_| Ok(())).unwrap();
            let path = dir.path().join("ck.bin");
            Checkpoint {
                config: cfg.clone(),
                vocab: corpus.vocab.clone(),
                model: first.model.clone(),
                train: Some(first.snapshot()),
            }
            .save(&path)
            .unwrap();
            let ck = Checkpoint::load(&path).unwrap();
            assert_eq!(ck.train.as_ref().unwrap(), &first.snapshot());
            let mut resumed = Trainer::restore(&ck.config, ck.model, ck.train.unwrap()).unwrap();
            resumed.run_until(&corpus, 16, |_| Ok(())).unwrap();
            assert_eq!(params_bits(&resumed.model), params_bits(&straight.model), "{method}");
        }
    }

    #[test]
    fn f32_storage_rounds_weights() {
        let corpus = corpus();
        let mut cfg = config(Method::FlopL0);
        cfg.precision = Precision::F32;
        let t = Trainer::new(&cfg, &corpus).unwrap();
        let ck = Checkpoint {
            config: cfg,
            vocab: corpus.vocab.clone(),
            model: t.model.clone(),
            train: None,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (a, b) in ck.model.params().iter().zip(back.model.params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        let corpus = corpus();
        let cfg = config(Method::NpL0);
        let t = Trainer::new(&cfg, &corpus).unwrap();
        let bytes = Checkpoint {
            config: cfg,
            vocab: corpus.vocab.clone(),
            model: t.model.clone(),
            train: Some(t.snapshot()),
        }
        .to_bytes()
        .unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert_eq!(err.kind(), "checkpoint");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bad).unwrap_err().kind(), "checkpoint");
        let mut bad = bytes;
        bad[8] = 9;
        assert_eq!(Checkpoint::from_bytes(&bad).unwrap_err().kind(), "checkpoint");
    }
}

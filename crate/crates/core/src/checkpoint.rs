//! Versioned binary checkpoint.
//!
//! Layout, all integers `u64` and all reals `f64`, little-endian:
//!
//! ```text
//! magic "DDGCKPT\0" | version | section count
//! section table: (id, offset, length) per section, offsets from file start
//! sections in id order:
//!   1 config   UTF-8 JSON of the run configuration
//!   2 student  model parameters
//!   3 teacher  decay, then model parameters
//!   4 codebook N, d_c, gamma, mode code, codewords (N x d_c), counts, sums
//!   5 meta     iteration, best validation accuracy
//! ```
//!
//! Model parameters are the encoder layer count followed by every tensor in
//! [`ModelParams::tensors`] order, each as rank, dims, then values.

use crate::autodiff::Tensor;
use crate::codebook::{Codebook, UpdateMode};
use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::model::{Linear, ModelParams, TeacherState};
use crate::training::RunConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDGCKPT\0";
pub const CHECKPOINT_VERSION: u64 = 1;

const SECTION_CONFIG: u64 = 1;
const SECTION_STUDENT: u64 = 2;
const SECTION_TEACHER: u64 = 3;
const SECTION_CODEBOOK: u64 = 4;
const SECTION_META: u64 = 5;
const SECTION_COUNT: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub student: ModelParams<f64>,
    pub teacher: TeacherState<f64>,
    pub codebook: Codebook<f64>,
    /// Iteration at which this snapshot was taken.
    pub iteration: u64,
    pub best_val_accuracy: f64,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor<f64>) {
    put_u64(buf, t.shape().len() as u64);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    put_f64s(buf, t.values());
}

fn put_params(buf: &mut Vec<u8>, p: &ModelParams<f64>) {
    put_u64(buf, p.encoder.len() as u64);
    for t in p.tensors() {
        put_tensor(buf, t);
    }
}

impl ByteReader<'_> {
    fn need_u64(&mut self) -> Result<u64> {
        self.u64().ok_or_else(|| bad("truncated section"))
    }

    fn need_f64(&mut self) -> Result<f64> {
        self.f64().ok_or_else(|| bad("truncated section"))
    }

    fn need_f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.bytes.len() / 8 {
            return Err(bad("length exceeds section"));
        }
        (0..n).map(|_| self.need_f64()).collect()
    }

    fn need_usize(&mut self) -> Result<usize> {
        usize::try_from(self.need_u64()?).map_err(|_| bad("length does not fit"))
    }

    fn tensor(&mut self) -> Result<Tensor<f64>> {
        let rank = self.need_usize()?;
        if rank == 0 || rank > 4 {
            return Err(bad(format!("unsupported tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.need_usize()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
        let values = self.need_f64s(len)?;
        Tensor::new(shape, values).map_err(|e| bad(e.to_string()))
    }

    fn linear(&mut self) -> Result<Linear<f64>> {
        let weight = self.tensor()?;
        let bias = self.tensor()?;
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(bad("layer weight and bias shapes disagree"));
        }
        Ok(Linear { weight, bias })
    }

    fn params(&mut self) -> Result<ModelParams<f64>> {
        let layers = self.need_usize()?;
        if layers == 0 || layers > 16 {
            return Err(bad(format!("unsupported encoder depth {layers}")));
        }
        let encoder = (0..layers).map(|_| self.linear()).collect::<Result<Vec<_>>>()?;
        let classifier = self.linear()?;
        let chained = encoder.windows(2).all(|w| w[0].outputs() == w[1].inputs());
        if !chained || encoder[layers - 1].outputs() != classifier.inputs() {
            return Err(bad("layer sizes do not chain"));
        }
        Ok(ModelParams { encoder, classifier })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(bad("trailing bytes in section"));
        }
        Ok(())
    }
}

impl Checkpoint {
    /// The codebook the student consumes, if quantization is enabled.
    pub fn active_codebook(&self) -> Option<&Codebook<f64>> {
        self.config.codebook.enabled.then_some(&self.codebook)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut student = Vec::new();
        put_params(&mut student, &self.student);
        let mut teacher = Vec::new();
        put_f64s(&mut teacher, &[self.teacher.decay]);
        put_params(&mut teacher, &self.teacher.params);
        let cb = &self.codebook;
        let mut codebook = Vec::new();
        put_u64(&mut codebook, cb.size() as u64);
        put_u64(&mut codebook, cb.dim() as u64);
        put_f64s(&mut codebook, &[cb.gamma()]);
        put_u64(&mut codebook, cb.mode().code());
        put_f64s(&mut codebook, cb.codewords().values());
        put_f64s(&mut codebook, cb.ema_counts());
        put_f64s(&mut codebook, cb.ema_sums());
        let mut meta = Vec::new();
        put_u64(&mut meta, self.iteration);
        put_f64s(&mut meta, &[self.best_val_accuracy]);

        let sections = [
            (SECTION_CONFIG, config),
            (SECTION_STUDENT, student),
            (SECTION_TEACHER, teacher),
            (SECTION_CODEBOOK, codebook),
            (SECTION_META, meta),
        ];
        let header = 8 + 8 + 8 + sections.len() * 24;
        let mut out = Vec::with_capacity(header + sections.iter().map(|s| s.1.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u64(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, SECTION_COUNT);
        let mut offset = header as u64;
        for (id, body) in &sections {
            put_u64(&mut out, *id);
            put_u64(&mut out, offset);
            put_u64(&mut out, body.len() as u64);
            offset += body.len() as u64;
        }
        for (_, body) in &sections {
            out.extend_from_slice(body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = r.need_u64()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if r.need_u64()? != SECTION_COUNT {
            return Err(bad("unexpected section count"));
        }
        let mut bodies: Vec<&[u8]> = Vec::new();
        let mut expected_offset = 8 + 8 + 8 + SECTION_COUNT * 24;
        for id in 1..=SECTION_COUNT {
            let (sid, offset, len) = (r.need_u64()?, r.need_u64()?, r.need_u64()?);
            if sid != id || offset != expected_offset {
                return Err(bad("malformed section table"));
            }
            let start = usize::try_from(offset).map_err(|_| bad("offset too large"))?;
            let end = start.checked_add(usize::try_from(len).map_err(|_| bad("length too large"))?).ok_or_else(|| bad("overflow"))?;
            bodies.push(bytes.get(start..end).ok_or_else(|| bad(format!("section {id} out of bounds")))?);
            expected_offset += len;
        }
        if expected_offset != bytes.len() as u64 {
            return Err(bad("trailing bytes"));
        }

        let config: RunConfig =
            serde_json::from_slice(bodies[0]).map_err(|e| bad(format!("config section: {e}")))?;
        config.validate().map_err(|e| bad(format!("config section: {e}")))?;

        let mut s = ByteReader { bytes: bodies[1], pos: 0 };
        let student = s.params()?;
        s.finish()?;

        let mut t = ByteReader { bytes: bodies[2], pos: 0 };
        let decay = t.need_f64()?;
        let teacher_params = t.params()?;
        t.finish()?;
        if !teacher_params.same_shapes(&student) {
            return Err(bad("teacher and student shapes differ"));
        }
        let mut teacher = TeacherState::new(&teacher_params, decay).map_err(|e| bad(e.to_string()))?;
        teacher.params = teacher_params;

        let mut c = ByteReader { bytes: bodies[3], pos: 0 };
        let (n, d) = (c.need_usize()?, c.need_usize()?);
        let gamma = c.need_f64()?;
        let mode = UpdateMode::from_code(c.need_u64()?).ok_or_else(|| bad("unknown codebook mode"))?;
        let cells = n.checked_mul(d).ok_or_else(|| bad("codebook too large"))?;
        let codewords = Tensor::new(vec![n, d], c.need_f64s(cells)?).map_err(|e| bad(e.to_string()))?;
        let counts = c.need_f64s(n)?;
        let sums = c.need_f64s(cells)?;
        c.finish()?;
        let codebook = Codebook::from_parts(codewords, counts, sums, gamma, mode).map_err(|e| bad(e.to_string()))?;
        if codebook.dim() != student.dim() {
            return Err(bad("codeword dimension differs from the feature dimension"));
        }

        let mut m = ByteReader { bytes: bodies[4], pos: 0 };
        let iteration = m.need_u64()?;
        let best_val_accuracy = m.need_f64()?;
        m.finish()?;

        Ok(Self { config, student, teacher, codebook, iteration, best_val_accuracy })
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;
    use crate::model::ModelParams;

    fn sample() -> Checkpoint {
        let config = RunConfig::default();
        let student = ModelParams::init(&config.architecture(), 3).unwrap();
        let mut teacher = TeacherState::new(&student, 0.999).unwrap();
        teacher.params.classifier.bias.values_mut()[0] = 0.25;
        let codebook = Codebook::init(64, 16, 0.99, UpdateMode::Ema, 4).unwrap();
        Checkpoint { config, student, teacher, codebook, iteration: 150, best_val_accuracy: 0.875 }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v = bytes.clone();
        v[8] = 2;
        assert!(Checkpoint::from_bytes(&v).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"short").is_err());
    }

    #[test]
    fn sections_follow_the_table() {
        let bytes = sample().to_bytes();
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        assert_eq!(word(8), CHECKPOINT_VERSION);
        assert_eq!(word(16), 5);
        let codebook_offset = word(24 + 3 * 24 + 8) as usize;
        let cb = |i: usize| u64::from_le_bytes(bytes[codebook_offset + 8 * i..codebook_offset + 8 * i + 8].try_into().unwrap());
        assert_eq!((cb(0), cb(1)), (64, 16));
        assert_eq!(f64::from_bits(cb(2)), 0.99);
        assert_eq!(cb(3), UpdateMode::Ema.code());
    }
}

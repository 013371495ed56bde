//! Checkpoint files.
//!
//! Layout: the 8-byte magic `PTDCKPT1`, the header length as a little-endian
//! u64, a JSON header (model kind, config, vocabulary, tensor index), then
//! every parameter as little-endian f32 in index order.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use ptd_core::baselines::HistoryClassifier;
use ptd_core::corpus::{Speaker, Vocabulary};
use ptd_core::decision::{DecisionConfig, DecisionModel, EncoderConfig};
use ptd_core::numerics::{ParamStore, Tensor};
use ptd_core::seq2seq::{PredictionConfig, PredictionModel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 8] = b"PTDCKPT1";
const MAGIC_FAMILY: &[u8; 7] = b"PTDCKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    UserPrediction,
    AgentPrediction,
    Decision,
    HistoryClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Position of the first value in the blob, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub vocab: Vocabulary,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Prediction(PredictionModel),
    Decision(DecisionModel),
    HistoryClassifier(HistoryClassifier),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Prediction(m) if m.role() == Speaker::User => ModelKind::UserPrediction,
            Model::Prediction(_) => ModelKind::AgentPrediction,
            Model::Decision(_) => ModelKind::Decision,
            Model::HistoryClassifier(_) => ModelKind::HistoryClassifier,
        }
    }

    fn parts(&self) -> (serde_json::Value, &Vocabulary, &ParamStore) {
        let json = |v: Result<serde_json::Value, serde_json::Error>| v.expect("config serializes");
        match self {
            Model::Prediction(m) => (json(serde_json::to_value(m.config())), m.vocab(), m.params()),
            Model::Decision(m) => (json(serde_json::to_value(m.config())), m.vocab(), m.params()),
            Model::HistoryClassifier(m) => (json(serde_json::to_value(m.config())), m.vocab(), m.params()),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.parts().1
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let (config, vocab, store) = model.parts();
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        kind: model.kind(),
        config,
        vocab: vocab.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Splits a checkpoint prefix into its header and the blob offset.
fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    let bad = |m: &str| Error::checkpoint(path, m);
    if bytes.len() < 8 || &bytes[..7] != MAGIC_FAMILY {
        return Err(bad("bad magic"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad(&format!("unsupported version {:?}", bytes[7] as char)));
    }
    let len_bytes: [u8; 8] = bytes.get(8..16).ok_or_else(|| bad("truncated header"))?.try_into().expect("8 bytes");
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflows"))?;
    let end = 16usize.checked_add(len).ok_or_else(|| bad("header length overflows"))?;
    let json = bytes.get(16..end).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
    let mut expected = 0;
    for t in &header.tensors {
        if t.offset != expected {
            return Err(bad(&format!("tensor {} at offset {}, expected {expected}", t.name, t.offset)));
        }
        expected += t.shape.iter().product::<usize>();
    }
    Ok((header, end))
}

fn params(path: &Path, header: &Header, blob: &[u8]) -> Result<ParamStore> {
    let n = header.num_values();
    if blob.len() != 4 * n {
        return Err(Error::checkpoint(
            path,
            format!("blob holds {} bytes, index needs {}", blob.len(), 4 * n),
        ));
    }
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        let data = blob[4 * t.offset..4 * (t.offset + len)]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        store.add(t.name.clone(), Tensor::new(&t.shape, data)?);
    }
    Ok(store)
}

fn config<T: serde::de::DeserializeOwned>(path: &Path, header: &Header) -> Result<T> {
    serde_json::from_value(header.config.clone()).map_err(|e| Error::checkpoint(path, format!("config: {e}")))
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Model> {
    let (header, start) = parse_header(path, bytes)?;
    let store = params(path, &header, &bytes[start..])?;
    let vocab = header.vocab.clone();
    let layout = |e: ptd_core::Error| Error::checkpoint(path, format!("tensor index does not match the model: {e}"));
    Ok(match header.kind {
        ModelKind::UserPrediction | ModelKind::AgentPrediction => {
            let role = if header.kind == ModelKind::UserPrediction { Speaker::User } else { Speaker::Agent };
            let mut m = PredictionModel::new(role, config::<PredictionConfig>(path, &header)?, vocab, 0)?;
            m.load_params(store).map_err(layout)?;
            Model::Prediction(m)
        }
        ModelKind::Decision => {
            let mut m = DecisionModel::new(config::<DecisionConfig>(path, &header)?, vocab, 0)?;
            m.load_params(store).map_err(layout)?;
            Model::Decision(m)
        }
        ModelKind::HistoryClassifier => {
            let mut m = HistoryClassifier::new(config::<EncoderConfig>(path, &header)?, vocab, 0)?;
            m.load_params(store).map_err(layout)?;
            Model::HistoryClassifier(m)
        }
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    io::write_file(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::checkpoint(path, format!("cannot read: {e}")))?;
    from_bytes(path, &bytes)
}

/// Reads only the magic and header, not the parameter blob.
pub fn inspect(path: &Path) -> Result<Header> {
    let read_err = |e: std::io::Error| Error::checkpoint(path, format!("cannot read: {e}"));
    let mut f = File::open(path).map_err(read_err)?;
    let mut prefix = [0u8; 16];
    let mut got = 0;
    while got < 16 {
        match f.read(&mut prefix[got..]).map_err(read_err)? {
            0 => break,
            n => got += n,
        }
    }
    if got < 16 {
        return Err(parse_header(path, &prefix[..got]).err().unwrap_or_else(|| Error::checkpoint(path, "truncated header")));
    }
    let len = u64::from_le_bytes(prefix[8..16].try_into().expect("8 bytes"));
    let mut buf = prefix.to_vec();
    let mut json = Vec::new();
    f.take(len).read_to_end(&mut json).map_err(read_err)?;
    buf.extend_from_slice(&json);
    parse_header(path, &buf).map(|(h, _)| h)
}

fn expect_kind(path: &Path, model: Model, kinds: &[ModelKind]) -> Result<Model> {
    if kinds.contains(&model.kind()) {
        Ok(model)
    } else {
        Err(Error::checkpoint(path, format!("expected {kinds:?}, found {:?}", model.kind())))
    }
}

/// Loads a prediction model and checks its role.
pub fn load_prediction(path: &Path, role: Speaker) -> Result<PredictionModel> {
    let kind = if role == Speaker::User { ModelKind::UserPrediction } else { ModelKind::AgentPrediction };
    match expect_kind(path, load(path)?, &[kind])? {
        Model::Prediction(m) => Ok(m),
        _ => unreachable!("kind checked"),
    }
}

pub fn load_decision(path: &Path) -> Result<DecisionModel> {
    match expect_kind(path, load(path)?, &[ModelKind::Decision])? {
        Model::Decision(m) => Ok(m),
        _ => unreachable!("kind checked"),
    }
}

pub fn load_history_classifier(path: &Path) -> Result<HistoryClassifier> {
    match expect_kind(path, load(path)?, &[ModelKind::HistoryClassifier])? {
        Model::HistoryClassifier(m) => Ok(m),
        _ => unreachable!("kind checked"),
    }
}

/// Errors unless the checkpoint's vocabulary equals `vocab`.
pub fn check_vocab(path: &Path, found: &Vocabulary, vocab: &Vocabulary) -> Result<()> {
    if found != vocab {
        return Err(Error::checkpoint(
            path,
            format!(
                "vocabulary mismatch: {} tokens ({}) vs {} tokens ({})",
                found.len(),
                found.fingerprint(),
                vocab.len(),
                vocab.fingerprint()
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ptd_core::corpus::TagCaps;

    fn vocab(words: &str) -> Vocabulary {
        Vocabulary::build(words.split(' '), 1).unwrap()
    }

    fn small_prediction() -> PredictionModel {
        let cfg = PredictionConfig {
            d_tok: 4,
            d_turn: 2,
            d_sub: 2,
            d_spk: 2,
            hidden: 3,
            caps: TagCaps {
                max_turn: 3,
                max_sub_turn: 2,
                max_len: 8,
            },
            ..PredictionConfig::default()
        };
        PredictionModel::new(Speaker::Agent, cfg, vocab("a b c"), 1).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = Model::Prediction(small_prediction());
        let b = to_bytes(&m);
        assert_eq!(&b[..8], MAGIC);
        let back = from_bytes(Path::new("x"), &b).unwrap();
        assert_eq!(to_bytes(&back), b);
        assert_eq!(back.kind(), ModelKind::AgentPrediction);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = to_bytes(&Model::Prediction(small_prediction()));
        let p = Path::new("x");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(from_bytes(p, &bad).unwrap_err().to_string().contains("bad magic"));
        let mut v2 = b.clone();
        v2[7] = b'2';
        assert!(from_bytes(p, &v2).unwrap_err().to_string().contains("unsupported version"));
        assert!(from_bytes(p, &b[..b.len() - 3]).is_err());
        assert!(from_bytes(p, &b[..20]).is_err());
        assert_eq!(from_bytes(p, &bad).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn shifted_offsets_are_rejected() {
        let m = Model::Prediction(small_prediction());
        let b = to_bytes(&m);
        let len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&b[16..16 + len]).unwrap();
        header.tensors[1].offset += 1;
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&b[16 + len..]);
        assert!(from_bytes(Path::new("x"), &out).unwrap_err().to_string().contains("offset"));
    }

    #[test]
    fn inspect_reads_only_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::Prediction(small_prediction());
        save(&m, &path).unwrap();
        // Drop the blob entirely: inspection still succeeds, loading does not.
        let b = std::fs::read(&path).unwrap();
        let len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        std::fs::write(&path, &b[..16 + len]).unwrap();
        let h = inspect(&path).unwrap();
        assert_eq!(h.kind, ModelKind::AgentPrediction);
        assert_eq!(h.tensors.len(), small_prediction().params().len());
        assert!(load(&path).is_err());
    }

    #[test]
    fn vocabulary_mismatch_is_reported() {
        let a = vocab("a b c");
        let b = vocab("a b c d");
        assert!(check_vocab(Path::new("x"), &a, &b).is_err());
        check_vocab(Path::new("x"), &a, &a).unwrap();
    }
}

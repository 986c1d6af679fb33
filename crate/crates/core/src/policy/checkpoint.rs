//! Text checkpoint: a versioned header with the model dimensions, then one
//! `tensor <name> <rows> <cols>` line per block followed by its rows.

use std::path::Path;

use thiserror::Error;

use super::{Layout, ModelConfig, Policy};
use crate::vocab::{Vocab, VocabError};

const MAGIC: &str = "#cfparse-params v1";
pub const PARAMS_FILE: &str = "params.txt";
pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub(super) fn to_string(p: &Policy) -> String {
    use std::fmt::Write;
    let c = p.config();
    let mut s = format!("{MAGIC} hidden={} emb={} max_len={}\n", c.hidden, c.emb, c.max_len);
    for t in p.layout().tensors() {
        let _ = writeln!(s, "tensor {} {} {}", t.name, t.rows, t.cols);
        for row in p.params()[t.range()].chunks(t.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
    }
    s
}

fn header_field(fields: &[&str], key: &str) -> Option<usize> {
    fields
        .iter()
        .find_map(|f| f.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
}

pub(super) fn from_str(text: &str, src: Vocab, tgt: Vocab) -> Result<Policy, CheckpointError> {
    let err = |line: usize, msg: String| CheckpointError::Format { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint".into()))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| err(1, "missing or unsupported version header".into()))?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let dim = |k: &str| header_field(&fields, k).ok_or_else(|| err(1, format!("missing {k}")));
    let config = ModelConfig {
        hidden: dim("hidden")?,
        emb: dim("emb")?,
        max_len: dim("max_len")?,
    };
    config.validate().map_err(|e| err(1, e.to_string()))?;
    let layout = Layout::new(&config, src.len(), tgt.len());
    let mut params = Vec::with_capacity(layout.total());
    for t in layout.tensors() {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing tensor {}", t.name)))?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 4 || f[0] != "tensor" || f[1] != t.name {
            return Err(err(ln, format!("expected tensor {}", t.name)));
        }
        if f[2].parse::<usize>().ok() != Some(t.rows) || f[3].parse::<usize>().ok() != Some(t.cols) {
            return Err(err(ln, format!("shape of {} must be {}x{}", t.name, t.rows, t.cols)));
        }
        for _ in 0..t.rows {
            let (ln, row) = lines.next().ok_or_else(|| err(0, format!("truncated tensor {}", t.name)))?;
            let before = params.len();
            for v in row.split_whitespace() {
                let x: f64 = v.parse().map_err(|_| err(ln, format!("bad number `{v}`")))?;
                if !x.is_finite() {
                    return Err(err(ln, "non-finite parameter".into()));
                }
                params.push(x);
            }
            if params.len() - before != t.cols {
                return Err(err(ln, format!("expected {} values", t.cols)));
            }
        }
    }
    if let Some((ln, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(ln, format!("trailing content `{l}`")));
    }
    Policy::with_params(config, src, tgt, params).map_err(|e| err(0, e.to_string()))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(super) fn save(p: &Policy, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    p.src_vocab().write(&dir.join(SRC_VOCAB_FILE))?;
    p.tgt_vocab().write(&dir.join(TGT_VOCAB_FILE))?;
    let path = dir.join(PARAMS_FILE);
    std::fs::write(&path, to_string(p)).map_err(io(&path))
}

pub(super) fn load(dir: &Path) -> Result<Policy, CheckpointError> {
    let src = Vocab::read(&dir.join(SRC_VOCAB_FILE))?;
    let tgt = Vocab::read(&dir.join(TGT_VOCAB_FILE))?;
    let path = dir.join(PARAMS_FILE);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    from_str(&text, src, tgt)
}

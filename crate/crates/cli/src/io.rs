use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use vlrm_core::rewardshape::BadPhraseSet;
use vlrm_core::scorers::{train_reflm, RefLm};
use vlrm_core::textcore::{read_corpus, Corpus, Vocab};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REFLM_FILE: &str = "reflm.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Reads a user-supplied file; a missing or unreadable file is a usage error.
pub fn read_input(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn write_output(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Creates `dir` (and parents) for command outputs.
pub fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

pub struct DataDir {
    pub vocab: Vocab,
    pub train: Corpus,
    pub heldout: Option<Corpus>,
}

impl DataDir {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let vocab = Vocab::from_json(&read_input(&dir.join(VOCAB_FILE), "vocabulary")?)?;
        let train = load_corpus(&dir.join(CORPUS_FILE), &vocab)?;
        let held_path = dir.join(HELDOUT_FILE);
        let heldout = if held_path.exists() {
            Some(load_corpus(&held_path, &vocab)?)
        } else {
            None
        };
        Ok(DataDir { vocab, train, heldout })
    }

    pub fn reference_lm(&self, path: Option<&Path>, cfg: &RunConfig) -> Result<RefLm, CliError> {
        match path {
            Some(p) => {
                let lm = RefLm::from_text(&read_input(p, "reference LM")?)?;
                if lm.vocab_hash() != self.vocab.hash() {
                    return Err(CliError::Usage(format!("{} was built for a different vocabulary", p.display())));
                }
                Ok(lm)
            }
            None => {
                let refs: Vec<_> = self.train.entries.iter().map(|e| e.1.clone()).collect();
                Ok(train_reflm(&refs, &self.vocab, cfg.scorers.reflm_order, cfg.scorers.reflm_smoothing)?)
            }
        }
    }
}

fn load_corpus(path: &Path, vocab: &Vocab) -> Result<Corpus, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Usage(format!("cannot read corpus {}: {e}", path.display())))?;
    Ok(read_corpus(BufReader::new(file), vocab)?)
}

pub fn bad_phrases(path: Option<&PathBuf>) -> Result<BadPhraseSet, CliError> {
    match path {
        None => Ok(BadPhraseSet::default()),
        Some(p) => Ok(BadPhraseSet::parse(&read_input(p, "bad-phrase file")?)),
    }
}

/// Appends one JSON record per line.
pub struct JsonlWriter {
    file: fs::File,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn open(path: &Path, append: bool) -> Result<Self, CliError> {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
        Ok(JsonlWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: serde::Serialize>(&mut self, record: &T) -> Result<(), CliError> {
        let mut line = serde_json::to_vec(record).map_err(|e| CliError::Runtime(e.to_string()))?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", self.path.display())))
    }
}

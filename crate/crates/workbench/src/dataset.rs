//! Corpus directories.
//!
//! A corpus directory holds `spec.toml` (the generating [`SyntheticSpec`]),
//! `vocab.txt` (one tokenizer word per line) and, per split, `<split>.tensor`
//! (`u8` pixels, see [`crate::tensor_file`]) plus `<split>.tsv` with an
//! `id`, `caption`, `label` header.

use std::path::{Path, PathBuf};

use clipladder_core::train::{Corpus, PairDataset};

use crate::corpus::{vocabulary, Split, SyntheticSpec};
use crate::error::{read_text, write_file, Error, Result};
use crate::tensor_file::{read_tensor_file, write_tensor_file, DType};
use crate::tokenizer::WordTokenizer;

pub fn write_corpus(dir: &Path, spec: &SyntheticSpec, splits: &[Split]) -> Result<()> {
    let spec_text = toml::to_string(spec).map_err(|e| Error::Format(format!("cannot serialise spec: {e}")))?;
    write_file(&dir.join("spec.toml"), spec_text)?;
    write_file(&dir.join("vocab.txt"), vocabulary().join("\n") + "\n")?;
    for s in splits {
        write_tensor_file(&dir.join(format!("{}.tensor", s.name)), &s.images, DType::U8)?;
        let mut tsv = String::from("id\tcaption\tlabel\n");
        for (i, (c, l)) in s.captions.iter().zip(&s.labels).enumerate() {
            tsv.push_str(&format!("{i}\t{c}\t{l}\n"));
        }
        write_file(&dir.join(format!("{}.tsv", s.name)), tsv)?;
    }
    Ok(())
}

/// A corpus directory on disk.
#[derive(Debug, Clone)]
pub struct CorpusDir {
    pub root: PathBuf,
    pub spec: SyntheticSpec,
    pub vocab: Vec<String>,
}

impl CorpusDir {
    pub fn open(root: &Path) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(&read_text(&root.join("spec.toml"))?)
            .map_err(|e| Error::config(format!("{}: {e}", root.join("spec.toml").display())))?;
        let vocab = read_text(&root.join("vocab.txt"))?.lines().filter(|l| !l.is_empty()).map(String::from).collect();
        Ok(Self { root: root.to_path_buf(), spec, vocab })
    }

    pub fn tokenizer(&self, context_length: usize) -> Result<WordTokenizer> {
        Ok(WordTokenizer::new(&self.vocab, context_length)?)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.spec.class_names()
    }

    pub fn read_split(&self, name: &str) -> Result<Split> {
        let images = read_tensor_file(&self.root.join(format!("{name}.tensor")))?;
        let tsv_path = self.root.join(format!("{name}.tsv"));
        let text = read_text(&tsv_path)?;
        let mut lines = text.lines();
        if lines.next() != Some("id\tcaption\tlabel") {
            return Err(Error::Format(format!("{}: missing `id caption label` header", tsv_path.display())));
        }
        let (mut captions, mut labels) = (Vec::new(), Vec::new());
        for (row, line) in lines.enumerate() {
            let bad = || Error::Format(format!("{}: malformed row {}", tsv_path.display(), row + 1));
            let mut cols = line.split('\t');
            let id: usize = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let caption = cols.next().filter(|c| !c.is_empty()).ok_or_else(bad)?;
            let label: usize = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            if id != row || cols.next().is_some() {
                return Err(bad());
            }
            if label >= self.spec.classes {
                return Err(Error::Format(format!("{}: label {label} outside {} classes", tsv_path.display(), self.spec.classes)));
            }
            captions.push(caption.to_string());
            labels.push(label);
        }
        if images.shape().first() != Some(&labels.len()) {
            return Err(Error::Format(format!(
                "split `{name}`: {} rows in the TSV but tensor shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Split { name: name.to_string(), images, captions, labels })
    }

    pub fn pair_dataset(&self, name: &str, tokenizer: &WordTokenizer) -> Result<PairDataset> {
        Ok(self.read_split(name)?.to_pair_dataset(tokenizer)?)
    }

    /// Training corpus holding the named splits.
    pub fn corpus(&self, names: &[&str], tokenizer: &WordTokenizer) -> Result<Corpus> {
        let mut c = Corpus::default();
        for n in names {
            c.sets.insert(n.to_string(), self.pair_dataset(n, tokenizer)?);
        }
        Ok(c)
    }
}

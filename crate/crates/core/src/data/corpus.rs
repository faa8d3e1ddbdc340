//! Corpus directories: bundle files, split manifest and reference captions.
//!
//! A corpus directory holds one `.sfdr` file per image, a `manifest.txt`
//! with `<split>\t<relative path>` lines and a `references.txt` with
//! `<image_id>\t<ref_index>\t<sentence>` lines.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::bundle::{read_bundle_checked, write_bundle_with_header, CorpusHeader, FeatureBundle};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REFERENCES_FILE: &str = "references.txt";

/// Number of sliding windows of size `gamma` and stride `tau` along one side
/// of a `beta`-pixel image, squared.
///
/// A remainder in `(beta - gamma) / tau` is floored, which drops the partial
/// window at the border.
pub fn roi_window_count(beta: i64, gamma: i64, tau: i64) -> Result<usize> {
    if tau <= 0 {
        return Err(Error::Argument(format!("window stride must be positive, got {tau}")));
    }
    if gamma <= 0 || gamma > beta {
        return Err(Error::Argument(format!("window size {gamma} must be in 1..={beta}")));
    }
    let span = beta - gamma;
    if span % tau != 0 {
        log::warn!("(beta - gamma) = {span} is not a multiple of stride {tau}; flooring window count");
    }
    let per_side = (span / tau + 1) as usize;
    Ok(per_side * per_side)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// 80/10/10 assignment of `n` items by seeded shuffle. Validation and test
/// each get `n / 10` items (floored), the rest go to training.
pub fn split_indices(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = n / 10;
    let mut splits = vec![Split::Train; n];
    for &i in &order[..held] {
        splits[i] = Split::Val;
    }
    for &i in &order[held..2 * held] {
        splits[i] = Split::Test;
    }
    splits
}

/// A loaded corpus, bundles grouped by split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub train: Vec<FeatureBundle>,
    pub val: Vec<FeatureBundle>,
    pub test: Vec<FeatureBundle>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[FeatureBundle] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &FeatureBundle> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Parses manifest text into `(split, relative path)` pairs.
pub fn parse_manifest(text: &str) -> Result<Vec<(Split, PathBuf)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, path) = line.split_once('\t').ok_or_else(|| Error::Format {
            offset: lineno as u64,
            msg: format!("manifest line {} lacks a tab separator", lineno + 1),
        })?;
        out.push((split.parse()?, PathBuf::from(path)));
    }
    Ok(out)
}

/// Writes bundles plus manifest and references into `dir`.
pub fn write_corpus(dir: &Path, header: &CorpusHeader, bundles: &[FeatureBundle], splits: &[Split]) -> Result<()> {
    assert_eq!(bundles.len(), splits.len());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (b, s) in bundles.iter().zip(splits) {
        let name = format!("{}.sfdr", b.image_id);
        write_bundle_with_header(b, header, dir.join(&name))?;
        manifest.push_str(&format!("{s}\t{name}\n"));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(REFERENCES_FILE);
    fs::write(&path, format_references(bundles)).map_err(|e| Error::io(&path, e))
}

/// Reads every bundle listed in `dir/manifest.txt`, checking that all share
/// the first bundle's header.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries = parse_manifest(&text)?;
    let Some((_, first)) = entries.first() else {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{} lists no bundles", path.display()),
        });
    };
    let (header, _) = read_bundle_checked(dir.join(first), None)?;
    let loaded: Vec<(Split, FeatureBundle)> = entries
        .par_iter()
        .map(|(s, p)| read_bundle_checked(dir.join(p), Some(&header)).map(|(_, b)| (*s, b)))
        .collect::<Result<_>>()?;
    let mut corpus = Corpus {
        header,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (s, b) in loaded {
        match s {
            Split::Train => corpus.train.push(b),
            Split::Val => corpus.val.push(b),
            Split::Test => corpus.test.push(b),
        }
    }
    Ok(corpus)
}

/// `<image_id>\t<ref_index>\t<sentence>` lines for every caption.
pub fn format_references(bundles: &[FeatureBundle]) -> String {
    let mut out = String::new();
    for b in bundles {
        for (i, c) in b.captions.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\n", b.image_id, i, c.replace(['\t', '\n'], " ")));
        }
    }
    out
}

/// Parses a references file into image id → captions ordered by index.
pub fn parse_references(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut by_image: BTreeMap<String, BTreeMap<usize, String>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Format {
            offset: lineno as u64,
            msg: format!("references line {}: {msg}", lineno + 1),
        };
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(idx), Some(sentence)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected <image_id>\\t<ref_index>\\t<sentence>"));
        };
        let idx: usize = idx.trim().parse().map_err(|_| bad("ref_index is not an integer"))?;
        by_image.entry(id.to_string()).or_default().insert(idx, sentence.to_string());
    }
    Ok(by_image
        .into_iter()
        .map(|(k, v)| (k, v.into_values().collect()))
        .collect())
}

/// Parses `<image_id>\t<caption>` lines.
pub fn parse_captions(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, l)| {
            let l = l.trim_end_matches('\r');
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Format {
                    offset: lineno as u64,
                    msg: format!("captions line {} lacks a tab separator", lineno + 1),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{gen_synthetic_corpus, SyntheticSpec};

    #[test]
    fn window_counts() {
        assert_eq!(roi_window_count(256, 64, 32).unwrap(), 49);
        assert_eq!(roi_window_count(100, 100, 7).unwrap(), 1);
        assert_eq!(roi_window_count(500, 80, 70).unwrap(), 49);
        assert_eq!(roi_window_count(224, 32, 32).unwrap(), 49);
        // 43 / 10 floors to 4
        assert_eq!(roi_window_count(107, 64, 10).unwrap(), 25);
        assert!(roi_window_count(256, 64, 0).is_err());
        assert!(roi_window_count(256, 64, -3).is_err());
    }

    #[test]
    fn split_proportions_and_determinism() {
        let s = split_indices(100, 3);
        assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), 80);
        assert_eq!(s.iter().filter(|x| **x == Split::Val).count(), 10);
        assert_eq!(s, split_indices(100, 3));
        assert!(split_indices(8, 1).iter().all(|x| *x == Split::Train));
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let syn = gen_synthetic_corpus(20, &SyntheticSpec::desk(5));
        let splits = split_indices(20, 5);
        write_corpus(dir.path(), &syn.header, &syn.bundles, &splits).unwrap();
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!((c.train.len(), c.val.len(), c.test.len()), (16, 2, 2));
        assert_eq!(c.header, syn.header);
        let refs = parse_references(&fs::read_to_string(dir.path().join(REFERENCES_FILE)).unwrap()).unwrap();
        assert_eq!(refs.len(), 20);
        assert_eq!(refs["syn00000"], syn.bundles[0].captions);
    }

    #[test]
    fn malformed_text_files() {
        assert!(parse_manifest("train no-tab").is_err());
        assert!(parse_manifest("bogus\tx.sfdr").is_err());
        assert!(parse_references("a\tx\tsentence").is_err());
        assert!(parse_captions("id only").is_err());
        let r = parse_references("b\t1\tsecond\nb\t0\tfirst\n").unwrap();
        assert_eq!(r["b"], ["first", "second"]);
    }
}

use std::collections::BTreeMap;
use std::fmt;

use super::{bleu, cider, meteor_lite, rouge_l, Tokens};
use crate::config::CiderVariant;
use crate::data::tokenize;
use crate::error::{Error, Result};

pub const METEOR_NOTE: &str =
    "METEOR here is an exact-match approximation (no stemming, synonyms or paraphrase tables); it is not comparable to published METEOR numbers.";

/// Component metrics and the aggregate scores
/// `S_m = (B4 + M + R + C) / 4` and `S_m* = (B4 + M + R + C + S) / 5`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    /// 100 × raw CIDEr.
    pub cider: f64,
    /// Externally computed SPICE, never produced here.
    pub spice: Option<f64>,
    pub s_m: f64,
    pub s_m_star: Option<f64>,
}

/// Builds a report from components already on the reporting scales.
pub fn aggregate(bleu: [f64; 4], meteor: f64, rouge_l: f64, cider: f64, spice: Option<f64>) -> MetricReport {
    let base = bleu[3] + meteor + rouge_l + cider;
    MetricReport {
        bleu,
        meteor,
        rouge_l,
        cider,
        spice,
        s_m: base / 4.0,
        s_m_star: spice.map(|s| (base + s) / 5.0),
    }
}

/// Scores a caption file against references keyed by image id. Every
/// candidate needs references and every referenced image needs a candidate.
pub fn evaluate(
    candidates: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
    variant: CiderVariant,
    spice: Option<f64>,
) -> Result<MetricReport> {
    if let Some(id) = candidates.keys().find(|id| !references.contains_key(*id)) {
        return Err(Error::Data(format!("candidate {id} has no references")));
    }
    if let Some(id) = references.keys().find(|id| !candidates.contains_key(*id)) {
        return Err(Error::Data(format!("image {id} has references but no candidate")));
    }
    let cands: Vec<Tokens> = candidates.values().map(|c| tokenize(c)).collect();
    let refs: Vec<Vec<Tokens>> = candidates
        .keys()
        .map(|id| references[id].iter().map(|r| tokenize(r)).collect())
        .collect();
    let b = bleu(&cands, &refs, 4)?;
    Ok(aggregate(
        [b[0], b[1], b[2], b[3]],
        meteor_lite(&cands, &refs)?,
        rouge_l(&cands, &refs)?,
        100.0 * cider(&cands, &refs, variant)?,
        spice,
    ))
}

impl MetricReport {
    /// Named values in display order.
    pub fn entries(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("bleu1", Some(self.bleu[0])),
            ("bleu2", Some(self.bleu[1])),
            ("bleu3", Some(self.bleu[2])),
            ("bleu4", Some(self.bleu[3])),
            ("meteor_lite", Some(self.meteor)),
            ("rouge_l", Some(self.rouge_l)),
            ("cider", Some(self.cider)),
            ("spice", self.spice),
            ("s_m", Some(self.s_m)),
            ("s_m_star", self.s_m_star),
        ]
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let entries = self.entries();
        for (name, _) in &entries {
            write!(f, "{name:>12}")?;
        }
        writeln!(f)?;
        for (_, v) in &entries {
            match v {
                Some(v) => write!(f, "{v:>12.2}")?,
                None => write!(f, "{:>12}", "-")?,
            }
        }
        writeln!(f)?;
        writeln!(f)?;
        for (name, v) in &entries {
            if let Some(v) = v {
                writeln!(f, "{name}={v}")?;
            }
        }
        writeln!(f)?;
        writeln!(f, "# {METEOR_NOTE}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_rows_reproduce() {
        let rows = [
            (71.72, 47.34, 79.74, 328.64, 45.22, "131.86", "114.53"),
            (82.31, 54.76, 88.40, 448.76, 57.58, "168.56", "146.36"),
            (44.81, 34.10, 61.31, 283.11, 46.15, "105.83", "93.90"),
        ];
        for (b4, m, r, c, s, sm, sms) in rows {
            let rep = aggregate([0.0, 0.0, 0.0, b4], m, r, c, Some(s));
            assert_eq!(format!("{:.2}", rep.s_m), sm);
            assert_eq!(format!("{:.2}", rep.s_m_star.unwrap()), sms);
        }
    }

    #[test]
    fn spice_absent_means_no_star() {
        let rep = aggregate([0.0; 4], 0.0, 0.0, 0.0, None);
        assert_eq!(rep.s_m, 0.0);
        assert!(rep.s_m_star.is_none());
        assert!(rep.to_string().contains("not comparable"));
    }

    #[test]
    fn mismatched_ids_are_data_errors() {
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), "x".to_string());
        let mut r = BTreeMap::new();
        r.insert("b".to_string(), vec!["x".to_string()]);
        assert!(matches!(evaluate(&c, &r, CiderVariant::Plain, None), Err(Error::Data(_))));
    }
}

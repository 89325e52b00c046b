//! Metrics and analyses over predictions, attention maps and embeddings.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::elements::expand_formula;
use crate::encoder::{AttentionRecord, EncoderModel};
use crate::error::{Error, Result};
use crate::textgen::{DuplicateGroups, TextualRecord};
use crate::tokenizer::{SectionCode, TokenSequence};
use crate::training::predict_all;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub system_id: String,
    pub relaxer: Option<String>,
    pub predicted: f64,
    pub label: Option<f64>,
}

/// Predictions keyed by `(system_id, relaxer)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    rows: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(rows: Vec<Prediction>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert((r.system_id.as_str(), r.relaxer.as_deref())) {
                return Err(Error::invalid(
                    "system_id",
                    format!(
                        "duplicate prediction for `{}` (relaxer {})",
                        r.system_id,
                        r.relaxer.as_deref().unwrap_or("none")
                    ),
                ));
            }
        }
        Ok(Self { rows })
    }

    /// Predict every sequence; rows follow the input order.
    pub fn from_model(model: &EncoderModel, records: &[TextualRecord], seqs: &[TokenSequence]) -> Result<Self> {
        if records.len() != seqs.len() {
            return Err(Error::Precondition(format!(
                "{} records but {} token sequences",
                records.len(),
                seqs.len()
            )));
        }
        let preds = predict_all(model, seqs)?;
        Self::new(
            records
                .iter()
                .zip(preds)
                .map(|(r, p)| Prediction {
                    system_id: r.system_id.clone(),
                    relaxer: r.relaxer.clone(),
                    predicted: p,
                    label: r.energy_label,
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[Prediction] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `(predictions, labels)` of the labeled rows.
    pub fn labeled(&self) -> (Vec<f64>, Vec<f64>) {
        self.rows
            .iter()
            .filter_map(|r| r.label.map(|y| (r.predicted, y)))
            .unzip()
    }
}

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Precondition("no labeled predictions".into()));
    }
    Ok(())
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

/// `1 - SS_res / SS_tot`.
pub fn r2(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Precondition("r2 is undefined for constant labels".into()));
    }
    let ss_res: f64 = preds.iter().zip(labels).map(|(p, y)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Precondition(format!("csv: {e}"))
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Precondition(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Shortest decimal form that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Labeled rows as `system_id,relaxer,label,prediction`.
pub fn parity_csv(ps: &PredictionSet) -> Result<String> {
    csv_string(
        &["system_id", "relaxer", "label", "prediction"],
        ps.rows.iter().filter_map(|r| {
            r.label.map(|y| {
                vec![
                    r.system_id.clone(),
                    r.relaxer.clone().unwrap_or_default(),
                    fmt_f64(y),
                    fmt_f64(r.predicted),
                ]
            })
        }),
    )
}

pub fn parity_export(ps: &PredictionSet, path: &Path) -> Result<()> {
    numerics::write_atomic(path, parity_csv(ps)?.as_bytes())?;
    Ok(())
}

/// Inverse of [`parity_csv`]; every row comes back labeled.
pub fn parse_parity_csv(text: &str) -> Result<PredictionSet> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let num = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                line,
                message: format!("bad number in column {}", k + 1),
            })
        };
        let relaxer = rec.get(1).filter(|s| !s.is_empty()).map(str::to_owned);
        rows.push(Prediction {
            system_id: rec.get(0).unwrap_or_default().to_owned(),
            relaxer,
            label: Some(num(2)?),
            predicted: num(3)?,
        });
    }
    PredictionSet::new(rows)
}

pub fn predictions_csv(ps: &PredictionSet) -> Result<String> {
    csv_string(
        &["system_id", "relaxer", "prediction", "label"],
        ps.rows.iter().map(|r| {
            vec![
                r.system_id.clone(),
                r.relaxer.clone().unwrap_or_default(),
                fmt_f64(r.predicted),
                r.label.map(fmt_f64).unwrap_or_default(),
            ]
        }),
    )
}

/// Dataset-mean share of `<s>` attention landing on each bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionReport {
    pub self_token: f64,
    pub adsorbate: f64,
    pub catalyst: f64,
    pub configuration: f64,
}

impl AttentionReport {
    pub fn total(&self) -> f64 {
        self.self_token + self.adsorbate + self.catalyst + self.configuration
    }

    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["self", "adsorbate", "catalyst", "configuration"],
            [vec![
                fmt_f64(self.self_token),
                fmt_f64(self.adsorbate),
                fmt_f64(self.catalyst),
                fmt_f64(self.configuration),
            ]],
        )
    }
}

/// Head-averaged `<s>` query row of one sequence, summed per bucket:
/// `[self, adsorbate, catalyst, configuration]`.
pub fn attention_buckets(rec: &AttentionRecord) -> Result<[f64; 4]> {
    if rec.heads.is_empty() {
        return Err(Error::Precondition("attention record without heads".into()));
    }
    let h = rec.heads.len() as f64;
    let mut out = [0.0; 4];
    for (k, section) in rec.sections.iter().enumerate() {
        let mass: f64 = rec.heads.iter().map(|a| a.at(0, k)).sum::<f64>() / h;
        let bucket = match section {
            SectionCode::SelfToken => 0,
            SectionCode::Adsorbate => 1,
            SectionCode::Catalyst => 2,
            SectionCode::Configuration => 3,
            SectionCode::Pad => continue,
        };
        out[bucket] += mass;
    }
    Ok(out)
}

/// Sum attention mass per bucket for each sequence, then average over sequences.
pub fn sectional_attention(model: &EncoderModel, seqs: &[TokenSequence]) -> Result<AttentionReport> {
    if seqs.is_empty() {
        return Err(Error::Precondition("no sequences to analyse".into()));
    }
    let mut acc = [0.0; 4];
    for t in seqs {
        let (_, rec) = model.encode_tokens(t)?;
        for (a, b) in acc.iter_mut().zip(attention_buckets(&rec)?) {
            *a += b;
        }
    }
    let n = seqs.len() as f64;
    Ok(AttentionReport {
        self_token: acc[0] / n,
        adsorbate: acc[1] / n,
        catalyst: acc[2] / n,
        configuration: acc[3] / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuplicateBreakdown {
    /// `None` when no labeled record belongs to a duplicate group.
    pub mae_duplicate: Option<f64>,
    pub mae_unique: Option<f64>,
    pub count_duplicate: usize,
    pub count_unique: usize,
}

fn check_aligned(ps: &PredictionSet, groups: &DuplicateGroups) -> Result<()> {
    if ps.len() != groups.record_count() {
        return Err(Error::Precondition(format!(
            "{} predictions but {} grouped records",
            ps.len(),
            groups.record_count()
        )));
    }
    Ok(())
}

/// MAE over labeled records in duplicate groups versus singleton groups.
/// Prediction `i` must belong to grouped record `i`.
pub fn duplicate_breakdown(ps: &PredictionSet, groups: &DuplicateGroups) -> Result<DuplicateBreakdown> {
    check_aligned(ps, groups)?;
    let (mut dup, mut uniq) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
    for (i, r) in ps.rows.iter().enumerate() {
        let Some(y) = r.label else { continue };
        let target = if groups.is_in_duplicate(i).expect("aligned") {
            &mut dup
        } else {
            &mut uniq
        };
        target.0.push(r.predicted);
        target.1.push(y);
    }
    let opt_mae = |(p, y): &(Vec<f64>, Vec<f64>)| if p.is_empty() { Ok(None) } else { mae(p, y).map(Some) };
    Ok(DuplicateBreakdown {
        mae_duplicate: opt_mae(&dup)?,
        mae_unique: opt_mae(&uniq)?,
        count_duplicate: dup.0.len(),
        count_unique: uniq.0.len(),
    })
}

/// Largest population std of predictions within any duplicate group.
pub fn max_within_group_std(ps: &PredictionSet, groups: &DuplicateGroups) -> Result<f64> {
    check_aligned(ps, groups)?;
    let mut worst: f64 = 0.0;
    for g in groups.duplicates() {
        let v: Vec<f64> = g.members.iter().map(|&i| ps.rows[i].predicted).collect();
        worst = worst.max(centered_std(&v, 0.0));
    }
    Ok(worst)
}

/// Sample standard deviation (`n - 1`).
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    Some(centered_std(values, 1.0))
}

/// Std with `ddof` degrees of freedom removed. Values are shifted by the
/// first one before averaging, so bit-identical inputs give exactly 0.
fn centered_std(values: &[f64], ddof: f64) -> f64 {
    let n = values.len() as f64;
    let d: Vec<f64> = values.iter().map(|x| x - values[0]).collect();
    let mean = d.iter().sum::<f64>() / n;
    (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - ddof)).sqrt()
}

/// Mean over systems of the sample std of predictions across relaxer
/// variants. Systems with a single variant are left out.
pub fn cross_relaxer_uncertainty(ps: &PredictionSet) -> Result<f64> {
    let mut by_system: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &ps.rows {
        by_system.entry(&r.system_id).or_default().push(r.predicted);
    }
    let stds: Vec<f64> = by_system.values().filter_map(|v| sample_std(v)).collect();
    if stds.is_empty() {
        return Err(Error::Precondition("no system has two or more relaxer variants".into()));
    }
    Ok(stds.iter().sum::<f64>() / stds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdsorbateClass {
    OxygenHydrogen,
    C1,
    C2,
    Nitrogen,
}

impl fmt::Display for AdsorbateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OxygenHydrogen => "O&H",
            Self::C1 => "C1",
            Self::C2 => "C2",
            Self::Nitrogen => "N",
        })
    }
}

/// Nitrogen-containing first, then by carbon count; anything else is O&H.
pub fn adsorbate_class(symbol: &str) -> AdsorbateClass {
    let Some(atoms) = expand_formula(symbol) else {
        log::warn!("cannot parse adsorbate `{symbol}`; classed as O&H");
        return AdsorbateClass::OxygenHydrogen;
    };
    if atoms.iter().any(|a| a == "N") {
        return AdsorbateClass::Nitrogen;
    }
    match atoms.iter().filter(|a| *a == "C").count() {
        0 => {
            if atoms.iter().any(|a| a != "O" && a != "H") {
                log::warn!("adsorbate `{symbol}` has elements besides C, H, O, N; classed as O&H");
            }
            AdsorbateClass::OxygenHydrogen
        }
        1 => AdsorbateClass::C1,
        _ => AdsorbateClass::C2,
    }
}

/// `<s>` embeddings with label and adsorbate class, one row per record.
pub fn export_embeddings_csv(
    model: &EncoderModel,
    records: &[TextualRecord],
    seqs: &[TokenSequence],
) -> Result<String> {
    if records.len() != seqs.len() {
        return Err(Error::Precondition(format!(
            "{} records but {} token sequences",
            records.len(),
            seqs.len()
        )));
    }
    let d = model.config().d_model;
    let mut header: Vec<String> = vec!["system_id".into(), "energy_label".into(), "adsorbate_class".into()];
    header.extend((0..d).map(|k| format!("e{k}")));
    let mut rows = Vec::with_capacity(records.len());
    for (rc, sc) in records.chunks(64).zip(seqs.chunks(64)) {
        let refs: Vec<&TokenSequence> = sc.iter().collect();
        for (r, e) in rc.iter().zip(model.cls_embeddings(&refs)?) {
            let mut row = vec![
                r.system_id.clone(),
                r.energy_label.map(fmt_f64).unwrap_or_default(),
                adsorbate_class(r.adsorbate()).to_string(),
            ];
            row.extend(e.into_iter().map(fmt_f64));
            rows.push(row);
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_string(&header_refs, rows)
}

pub fn export_embeddings(
    model: &EncoderModel,
    records: &[TextualRecord],
    seqs: &[TokenSequence],
    path: &Path,
) -> Result<()> {
    numerics::write_atomic(path, export_embeddings_csv(model, records, seqs)?.as_bytes())?;
    Ok(())
}

//! Record selection, labeling, patient-level fold assignment and the
//! experiment presets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::wfdb::{self, ChannelSet, LeadId, RecordHeader};

/// Infarction localizations as annotated in the PTB database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Localization {
    Anterior,
    AnteroSeptal,
    AnteroSeptoLateral,
    AnteroLateral,
    Lateral,
    Inferior,
    InferoPosterior,
    InferoPosteroLateral,
    InferoLateral,
    Posterior,
    PosteroLateral,
}

impl Localization {
    pub const ALL: [Localization; 11] = [
        Localization::Anterior,
        Localization::AnteroSeptal,
        Localization::AnteroSeptoLateral,
        Localization::AnteroLateral,
        Localization::Lateral,
        Localization::Inferior,
        Localization::InferoPosterior,
        Localization::InferoPosteroLateral,
        Localization::InferoLateral,
        Localization::Posterior,
        Localization::PosteroLateral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Localization::Anterior => "anterior",
            Localization::AnteroSeptal => "antero-septal",
            Localization::AnteroSeptoLateral => "antero-septo-lateral",
            Localization::AnteroLateral => "antero-lateral",
            Localization::Lateral => "lateral",
            Localization::Inferior => "inferior",
            Localization::InferoPosterior => "infero-posterior",
            Localization::InferoPosteroLateral => "infero-postero-lateral",
            Localization::InferoLateral => "infero-lateral",
            Localization::Posterior => "posterior",
            Localization::PosteroLateral => "postero-lateral",
        }
    }

    /// Left coronary territory is aMI, right coronary territory is iMI.
    pub fn group(self) -> Group {
        use Localization::*;
        match self {
            Anterior | AnteroSeptal | AnteroSeptoLateral | AnteroLateral | Lateral => Group::Ami,
            Inferior | InferoPosterior | InferoPosteroLateral | InferoLateral | Posterior
            | PosteroLateral => Group::Imi,
        }
    }
}

impl fmt::Display for Localization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Localization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join("-");
        // Truncated spellings found in the PTB headers.
        let norm = match norm.as_str() {
            "infero-latera" => "infero-lateral",
            "infero-poster-lateral" => "infero-postero-lateral",
            other => other,
        };
        Localization::ALL
            .iter()
            .copied()
            .find(|l| l.name() == norm)
            .ok_or_else(|| Error::UnknownLocalization(s.to_string()))
    }
}

/// Maps a localization string to its aggregated group.
pub fn group_subdiagnosis(localization: &str) -> Result<Group> {
    localization.parse::<Localization>().map(Localization::group)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Hc,
    Ami,
    Imi,
    UnknownMi,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Hc => "HC",
            Group::Ami => "aMI",
            Group::Imi => "iMI",
            Group::UnknownMi => "unknownMI",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hc" => Ok(Group::Hc),
            "ami" => Ok(Group::Ami),
            "imi" => Ok(Group::Imi),
            "unknownmi" => Ok(Group::UnknownMi),
            _ => Err(Error::Config(format!("unknown group {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagnosisLabel {
    HealthyControl,
    /// `None` when the localization is unknown.
    Mi(Option<Localization>),
}

impl DiagnosisLabel {
    pub fn group(self) -> Group {
        match self {
            DiagnosisLabel::HealthyControl => Group::Hc,
            DiagnosisLabel::Mi(Some(l)) => l.group(),
            DiagnosisLabel::Mi(None) => Group::UnknownMi,
        }
    }

    pub fn is_mi(self) -> bool {
        matches!(self, DiagnosisLabel::Mi(_))
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiagnosisLabel::HealthyControl => f.write_str("HC"),
            DiagnosisLabel::Mi(Some(l)) => write!(f, "MI:{l}"),
            DiagnosisLabel::Mi(None) => f.write_str("MI:unknown"),
        }
    }
}

impl FromStr for DiagnosisLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("hc") {
            return Ok(DiagnosisLabel::HealthyControl);
        }
        match s.split_once(':') {
            Some((mi, loc)) if mi.eq_ignore_ascii_case("mi") => {
                if loc.eq_ignore_ascii_case("unknown") {
                    Ok(DiagnosisLabel::Mi(None))
                } else {
                    Ok(DiagnosisLabel::Mi(Some(loc.parse()?)))
                }
            }
            _ => Err(Error::Config(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordEntry {
    pub patient_id: String,
    pub record_id: String,
    pub label: DiagnosisLabel,
    pub record_date: Option<NaiveDate>,
    pub infarction_date: Option<NaiveDate>,
    pub treated: Option<bool>,
}

impl RecordEntry {
    pub fn new(patient_id: impl Into<String>, record_id: impl Into<String>, label: DiagnosisLabel) -> Self {
        RecordEntry {
            patient_id: patient_id.into(),
            record_id: record_id.into(),
            label,
            record_date: None,
            infarction_date: None,
            treated: None,
        }
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    ["%d/%m/%Y", "%d-%b-%y", "%d-%b-%Y", "%Y-%m-%d", "%d.%m.%Y"]
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(s, f).ok())
}

/// Labels a record from its header comments. Records with a diagnosis other
/// than myocardial infarction or healthy control yield `None`.
pub fn entry_from_header(patient_id: &str, header: &RecordHeader) -> Option<RecordEntry> {
    let reason = header.comment("Reason for admission")?.to_ascii_lowercase();
    let label = if reason.contains("healthy control") {
        DiagnosisLabel::HealthyControl
    } else if reason.contains("myocardial infarction") {
        let loc = header
            .comment("Acute infarction (localization)")
            .and_then(|l| l.parse::<Localization>().ok());
        DiagnosisLabel::Mi(loc)
    } else {
        return None;
    };
    let record_date = header.comment("ECG date").and_then(parse_date);
    let infarction_date = header
        .comment("Infarction date (acute)")
        .or_else(|| header.comment("Infarction date"))
        .and_then(parse_date);
    let intervention = header.comment("Catheterization date").and_then(parse_date);
    let treated = match (record_date, intervention) {
        (Some(ecg), Some(cath)) => Some(ecg > cath),
        _ => None,
    };
    Some(RecordEntry {
        patient_id: patient_id.to_string(),
        record_id: header.record_name.clone(),
        label,
        record_date,
        infarction_date,
        treated,
    })
}

/// Reads every `<root>/<patient>/<record>.hea` and labels it. Signal files
/// are not touched.
pub fn scan_data_root(root: &Path) -> Result<Vec<RecordEntry>> {
    let mut patients: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    patients.sort_by_key(|e| e.file_name());
    let mut out = Vec::new();
    for p in patients {
        let patient_id = p.file_name().to_string_lossy().into_owned();
        let mut headers: Vec<_> = fs::read_dir(p.path())?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|path| path.extension().is_some_and(|x| x == "hea"))
            .collect();
        headers.sort();
        for h in headers {
            let header = wfdb::parse_header(&fs::read_to_string(&h)?)?;
            if let Some(entry) = entry_from_header(&patient_id, &header) {
                out.push(entry);
            }
        }
    }
    Ok(out)
}

/// Loads a selected record's signal from the data root.
pub fn load_record(root: &Path, entry: &RecordEntry) -> Result<wfdb::SignalRecord> {
    wfdb::read_record(&root.join(&entry.patient_id), &entry.record_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelScheme {
    BinaryMiVsHc,
    ThreeClassHcAmiImi,
    /// Healthy controls against one MI group; other MI records are left out.
    HcVsGroup(Group),
}

impl LabelScheme {
    pub fn num_classes(self) -> usize {
        match self {
            LabelScheme::ThreeClassHcAmiImi => 3,
            _ => 2,
        }
    }

    /// Training class of a label, or `None` when the scheme leaves it out.
    pub fn class_of(self, label: DiagnosisLabel) -> Option<usize> {
        let g = label.group();
        match (self, g) {
            (_, Group::Hc) => Some(0),
            (_, Group::UnknownMi) => None,
            (LabelScheme::BinaryMiVsHc, _) => Some(1),
            (LabelScheme::ThreeClassHcAmiImi, Group::Ami) => Some(1),
            (LabelScheme::ThreeClassHcAmiImi, _) => Some(2),
            (LabelScheme::HcVsGroup(want), g) => (g == want).then_some(1),
        }
    }

    /// Probability of "myocardial infarction" from a class-probability row.
    pub fn mi_probability(self, probs: &[f64]) -> f64 {
        probs[1..].iter().sum()
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelScheme::BinaryMiVsHc => f.write_str("binary"),
            LabelScheme::ThreeClassHcAmiImi => f.write_str("three_class"),
            LabelScheme::HcVsGroup(g) => write!(f, "hc_vs_{g}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSelection {
    pub entries: Vec<RecordEntry>,
    pub label_scheme: LabelScheme,
    /// Fold index per record id, empty until folds are assigned.
    pub fold_of: BTreeMap<String, usize>,
}

impl DatasetSelection {
    pub fn new(entries: Vec<RecordEntry>, label_scheme: LabelScheme) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptySelection);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.record_id.as_str()) {
                return Err(Error::Data(format!("record {} selected twice", e.record_id)));
            }
        }
        Ok(DatasetSelection {
            entries,
            label_scheme,
            fold_of: BTreeMap::new(),
        })
    }

    pub fn num_folds(&self) -> usize {
        self.fold_of.values().max().map_or(0, |m| m + 1)
    }

    pub fn fold(&self, record_id: &str) -> Option<usize> {
        self.fold_of.get(record_id).copied()
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.patient_id.as_str()).collect()
    }

    /// Entries outside fold `fold`.
    pub fn train_entries(&self, fold: usize) -> Vec<&RecordEntry> {
        self.entries
            .iter()
            .filter(|e| self.fold(&e.record_id).is_some_and(|f| f != fold))
            .collect()
    }

    pub fn test_entries(&self, fold: usize) -> Vec<&RecordEntry> {
        self.entries
            .iter()
            .filter(|e| self.fold(&e.record_id) == Some(fold))
            .collect()
    }

    pub fn count_group(&self, g: Group) -> usize {
        self.entries.iter().filter(|e| e.label.group() == g).count()
    }

    pub fn count_patients_in_group(&self, g: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.label.group() == g)
            .map(|e| e.patient_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Patients that appear on both sides of any fold split.
    pub fn leaked_patients(&self) -> Vec<(usize, String)> {
        let mut leaks = Vec::new();
        for f in 0..self.num_folds() {
            let train: BTreeSet<_> = self.train_entries(f).iter().map(|e| e.patient_id.clone()).collect();
            for e in self.test_entries(f) {
                if train.contains(&e.patient_id) {
                    leaks.push((f, e.patient_id.clone()));
                }
            }
        }
        leaks.sort();
        leaks.dedup();
        leaks
    }
}

fn first_record_key(e: &RecordEntry) -> (bool, Option<NaiveDate>, &str) {
    (e.record_date.is_none(), e.record_date, e.record_id.as_str())
}

/// Keeps every healthy control record and, per MI patient, only the first
/// record (earliest ECG date, else lowest record id). MI records with unknown
/// localization are dropped.
pub fn select_records(all: &[RecordEntry]) -> Result<DatasetSelection> {
    let mut first_mi: BTreeMap<&str, &RecordEntry> = BTreeMap::new();
    let mut out = Vec::new();
    for e in all {
        match e.label.group() {
            Group::Hc => out.push(e.clone()),
            Group::UnknownMi => {}
            _ => {
                let slot = first_mi.entry(e.patient_id.as_str()).or_insert(e);
                if first_record_key(e) < first_record_key(slot) {
                    *slot = e;
                }
            }
        }
    }
    out.extend(first_mi.into_values().cloned());
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    DatasetSelection::new(out, LabelScheme::BinaryMiVsHc)
}

/// Healthy controls plus every record of one MI group, without the
/// first-record restriction.
pub fn select_all_of_group(all: &[RecordEntry], group: Group) -> Result<DatasetSelection> {
    let mut out: Vec<RecordEntry> = all
        .iter()
        .filter(|e| matches!(e.label.group(), Group::Hc) || e.label.group() == group)
        .cloned()
        .collect();
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    DatasetSelection::new(out, LabelScheme::HcVsGroup(group))
}

/// Stratified patient-level fold assignment over the strata HC/aMI/iMI.
///
/// Patients of each stratum are shuffled and dealt round-robin; the dealing
/// position carries over between strata so fold sizes differ by at most one.
pub fn assign_folds(selection: &DatasetSelection, k: usize, seed: u64) -> Result<DatasetSelection> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut by_patient: BTreeMap<&str, Vec<&RecordEntry>> = BTreeMap::new();
    for e in &selection.entries {
        by_patient.entry(e.patient_id.as_str()).or_default().push(e);
    }
    let mut strata: BTreeMap<Group, Vec<&str>> = BTreeMap::new();
    for (patient, entries) in &by_patient {
        let first = entries
            .iter()
            .min_by_key(|e| e.record_id.as_str())
            .expect("non-empty");
        strata.entry(first.label.group()).or_default().push(patient);
    }
    for (g, patients) in &strata {
        if patients.len() < k {
            return Err(Error::Stratification(format!(
                "stratum {g} has {} patients, fewer than {k} folds",
                patients.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of_patient: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cursor = 0usize;
    for patients in strata.values_mut() {
        patients.shuffle(&mut rng);
        for p in patients.iter() {
            fold_of_patient.insert(p, cursor % k);
            cursor += 1;
        }
    }
    let mut out = selection.clone();
    out.fold_of = selection
        .entries
        .iter()
        .map(|e| (e.record_id.clone(), fold_of_patient[e.patient_id.as_str()]))
        .collect();
    Ok(out)
}

/// How often each record enters one training epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    pub epoch_multiplicity: BTreeMap<String, usize>,
}

impl SamplingPlan {
    pub fn multiplicity(&self, record_id: &str) -> usize {
        self.epoch_multiplicity.get(record_id).copied().unwrap_or(0)
    }

    pub fn effective_epoch_size(&self) -> usize {
        self.epoch_multiplicity.values().sum()
    }
}

/// Healthy controls are oversampled 2:1.
pub fn healthy_multiplicity(label: DiagnosisLabel) -> usize {
    if label.group() == Group::Hc {
        2
    } else {
        1
    }
}

pub fn make_sampling_plan(selection: &DatasetSelection) -> SamplingPlan {
    SamplingPlan {
        epoch_multiplicity: selection
            .entries
            .iter()
            .map(|e| (e.record_id.clone(), healthy_multiplicity(e.label)))
            .collect(),
    }
}

// ------------------------------------------------------------ manifests

pub const MANIFEST_HEADER: [&str; 5] = ["record_id", "patient_id", "label", "group", "fold"];

pub fn write_manifest<W: std::io::Write>(w: W, selection: &DatasetSelection) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(MANIFEST_HEADER)?;
    for e in &selection.entries {
        let fold = selection.fold(&e.record_id).map(|f| f.to_string()).unwrap_or_default();
        wr.write_record([
            e.record_id.as_str(),
            e.patient_id.as_str(),
            &e.label.to_string(),
            &e.label.group().to_string(),
            &fold,
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_manifest<R: std::io::Read>(r: R, scheme: LabelScheme) -> Result<DatasetSelection> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Format(format!("unexpected manifest columns {headers:?}")));
    }
    let mut entries = Vec::new();
    let mut fold_of = BTreeMap::new();
    for row in rd.records() {
        let row = row?;
        let label: DiagnosisLabel = row[2].parse()?;
        let group: Group = row[3].parse()?;
        if group != label.group() {
            return Err(Error::Format(format!("record {}: group {group} disagrees with label {label}", &row[0])));
        }
        if !row[4].is_empty() {
            let fold = row[4]
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad fold {:?}", &row[4])))?;
            fold_of.insert(row[0].to_string(), fold);
        }
        entries.push(RecordEntry::new(&row[1], &row[0], label));
    }
    let mut sel = DatasetSelection::new(entries, scheme)?;
    sel.fold_of = fold_of;
    Ok(sel)
}

// -------------------------------------------------------------- presets

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    /// All healthy controls, first MI record per patient.
    FirstMiPerPatient,
    /// All healthy controls, all records of one MI group.
    AllMiOfGroup(Group),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSubset {
    AllMi,
    /// Positives restricted to one group; all healthy controls stay.
    Group(Group),
}

impl EvalSubset {
    pub fn includes(self, label: DiagnosisLabel) -> bool {
        match (self, label.group()) {
            (_, Group::Hc) => true,
            (_, Group::UnknownMi) => false,
            (EvalSubset::AllMi, _) => true,
            (EvalSubset::Group(want), g) => g == want,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPreset {
    pub name: String,
    pub channels: ChannelSet,
    pub selection: SelectionRule,
    pub train_scheme: LabelScheme,
    pub eval_subset: EvalSubset,
}

pub const PRESET_NAMES: [&str; 17] = [
    "table3_default",
    "table4_train_mi_eval_mi",
    "table4_train_mi_eval_ami",
    "table4_train_mi_eval_imi",
    "table4_train_ami_eval_ami",
    "table4_train_imi_eval_imi",
    "table4_train_ami_imi_eval_mi",
    "table4_train_ami_imi_eval_ami",
    "table4_train_ami_imi_eval_imi",
    "table5_literature",
    "table6_all",
    "table6_twelve",
    "table6_frank",
    "table6_limb",
    "table6_i",
    "table6_ii",
    "table6_iii",
];

pub fn benchmark_preset(name: &str) -> Result<ExperimentPreset> {
    use LabelScheme::*;
    let key = name.trim().to_ascii_lowercase();
    let default = |channels| (channels, SelectionRule::FirstMiPerPatient, BinaryMiVsHc, EvalSubset::AllMi);
    let (channels, selection, train_scheme, eval_subset) = match key.as_str() {
        "table3_default" | "table4_train_mi_eval_mi" | "table6_twelve" => {
            default(ChannelSet::EightNonredundant)
        }
        "table4_train_mi_eval_ami" => (
            ChannelSet::EightNonredundant,
            SelectionRule::FirstMiPerPatient,
            BinaryMiVsHc,
            EvalSubset::Group(Group::Ami),
        ),
        "table4_train_mi_eval_imi" => (
            ChannelSet::EightNonredundant,
            SelectionRule::FirstMiPerPatient,
            BinaryMiVsHc,
            EvalSubset::Group(Group::Imi),
        ),
        "table4_train_ami_eval_ami" => (
            ChannelSet::EightNonredundant,
            SelectionRule::FirstMiPerPatient,
            HcVsGroup(Group::Ami),
            EvalSubset::Group(Group::Ami),
        ),
        "table4_train_imi_eval_imi" => (
            ChannelSet::EightNonredundant,
            SelectionRule::FirstMiPerPatient,
            HcVsGroup(Group::Imi),
            EvalSubset::Group(Group::Imi),
        ),
        "table4_train_ami_imi_eval_mi" => (
            ChannelSet::EightNonredundant,
            SelectionRule::FirstMiPerPatient,
            ThreeClassHcAmiImi,
            EvalSubset::AllMi,
        ),
        "table4_train_ami_imi_eval_ami" => (
            ChannelSet::EightNonredundant,
            SelectionRule::FirstMiPerPatient,
            ThreeClassHcAmiImi,
            EvalSubset::Group(Group::Ami),
        ),
        "table4_train_ami_imi_eval_imi" => (
            ChannelSet::EightNonredundant,
            SelectionRule::FirstMiPerPatient,
            ThreeClassHcAmiImi,
            EvalSubset::Group(Group::Imi),
        ),
        "table5_literature" => (
            ChannelSet::Limb,
            SelectionRule::AllMiOfGroup(Group::Imi),
            HcVsGroup(Group::Imi),
            EvalSubset::Group(Group::Imi),
        ),
        "table6_all" => default(ChannelSet::All15),
        "table6_frank" => default(ChannelSet::Frank),
        "table6_limb" => default(ChannelSet::Limb),
        "table6_i" => default(ChannelSet::Single(LeadId::I)),
        "table6_ii" => default(ChannelSet::Single(LeadId::II)),
        "table6_iii" => default(ChannelSet::Single(LeadId::III)),
        _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
    };
    Ok(ExperimentPreset {
        name: key,
        channels,
        selection,
        train_scheme,
        eval_subset,
    })
}

impl ExperimentPreset {
    /// Applies the preset's selection rule and training label scheme.
    pub fn select(&self, all: &[RecordEntry]) -> Result<DatasetSelection> {
        let mut sel = match self.selection {
            SelectionRule::FirstMiPerPatient => select_records(all)?,
            SelectionRule::AllMiOfGroup(g) => select_all_of_group(all, g)?,
        };
        sel.label_scheme = self.train_scheme;
        Ok(sel)
    }
}

//! Reading and writing PTB-style WFDB records.
//!
//! A record is a text header (`<name>.hea`) plus one binary signal file in
//! storage format 16: little-endian signed 16-bit samples, interleaved across
//! channels. Samples are calibrated to millivolts as `(raw - zero) / gain`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The 15 leads recorded in the PTB database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LeadId {
    I,
    II,
    III,
    AVR,
    AVL,
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    Vx,
    Vy,
    Vz,
}

impl LeadId {
    pub const ALL: [LeadId; 15] = [
        LeadId::I,
        LeadId::II,
        LeadId::III,
        LeadId::AVR,
        LeadId::AVL,
        LeadId::AVF,
        LeadId::V1,
        LeadId::V2,
        LeadId::V3,
        LeadId::V4,
        LeadId::V5,
        LeadId::V6,
        LeadId::Vx,
        LeadId::Vy,
        LeadId::Vz,
    ];

    /// Lower-case name as written in PTB headers.
    pub fn wfdb_name(self) -> &'static str {
        match self {
            LeadId::I => "i",
            LeadId::II => "ii",
            LeadId::III => "iii",
            LeadId::AVR => "avr",
            LeadId::AVL => "avl",
            LeadId::AVF => "avf",
            LeadId::V1 => "v1",
            LeadId::V2 => "v2",
            LeadId::V3 => "v3",
            LeadId::V4 => "v4",
            LeadId::V5 => "v5",
            LeadId::V6 => "v6",
            LeadId::Vx => "vx",
            LeadId::Vy => "vy",
            LeadId::Vz => "vz",
        }
    }

    /// Limb leads that are linear combinations of I and II.
    pub fn is_derivable_limb(self) -> bool {
        matches!(self, LeadId::III | LeadId::AVR | LeadId::AVL | LeadId::AVF)
    }

    /// Coefficients `(a, b)` such that `lead = a * I + b * II`.
    fn limb_coefficients(self) -> Option<(f64, f64)> {
        match self {
            LeadId::I => Some((1.0, 0.0)),
            LeadId::II => Some((0.0, 1.0)),
            LeadId::III => Some((-1.0, 1.0)),
            LeadId::AVR => Some((-0.5, -0.5)),
            LeadId::AVL => Some((1.0, -0.5)),
            LeadId::AVF => Some((-0.5, 1.0)),
            _ => None,
        }
    }
}

impl fmt::Display for LeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LeadId::I => "I",
            LeadId::II => "II",
            LeadId::III => "III",
            LeadId::AVR => "aVR",
            LeadId::AVL => "aVL",
            LeadId::AVF => "aVF",
            LeadId::V1 => "V1",
            LeadId::V2 => "V2",
            LeadId::V3 => "V3",
            LeadId::V4 => "V4",
            LeadId::V5 => "V5",
            LeadId::V6 => "V6",
            LeadId::Vx => "vx",
            LeadId::Vy => "vy",
            LeadId::Vz => "vz",
        };
        f.write_str(s)
    }
}

impl FromStr for LeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        LeadId::ALL
            .iter()
            .copied()
            .find(|l| l.wfdb_name() == lower)
            .ok_or_else(|| Error::Format(format!("unknown lead name {s:?}")))
    }
}

/// Named lead subsets used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelSet {
    All15,
    Twelve,
    EightNonredundant,
    Frank,
    Limb,
    Single(LeadId),
}

impl ChannelSet {
    /// Canonical lead order for this set.
    pub fn leads(self) -> Vec<LeadId> {
        use LeadId::*;
        match self {
            ChannelSet::All15 => LeadId::ALL.to_vec(),
            ChannelSet::Twelve => LeadId::ALL[..12].to_vec(),
            ChannelSet::EightNonredundant => vec![I, II, V1, V2, V3, V4, V5, V6],
            ChannelSet::Frank => vec![Vx, Vy, Vz],
            ChannelSet::Limb => vec![I, II, III, AVR, AVL, AVF],
            ChannelSet::Single(l) => vec![l],
        }
    }

    pub fn len(self) -> usize {
        self.leads().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelSet::All15 => f.write_str("all15"),
            ChannelSet::Twelve => f.write_str("twelve"),
            ChannelSet::EightNonredundant => f.write_str("eight"),
            ChannelSet::Frank => f.write_str("frank"),
            ChannelSet::Limb => f.write_str("limb"),
            ChannelSet::Single(l) => write!(f, "{l}"),
        }
    }
}

impl FromStr for ChannelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all15" | "all" => Ok(ChannelSet::All15),
            "twelve" | "12" => Ok(ChannelSet::Twelve),
            "eight" | "eight_nonredundant" | "8" => Ok(ChannelSet::EightNonredundant),
            "frank" => Ok(ChannelSet::Frank),
            "limb" => Ok(ChannelSet::Limb),
            other => other
                .parse::<LeadId>()
                .map(ChannelSet::Single)
                .map_err(|_| Error::Config(format!("unknown channel set {s:?}"))),
        }
    }
}

/// One signal line of a header.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file_name: String,
    /// ADC units per millivolt.
    pub gain: f64,
    pub baseline: Option<i32>,
    pub units: Option<String>,
    pub adc_resolution: u32,
    pub adc_zero: i32,
    pub initial_value: i32,
    pub checksum: Option<i16>,
    pub block_size: u32,
    pub lead_name: String,
}

impl SignalSpec {
    pub fn lead(&self) -> Option<LeadId> {
        self.lead_name.parse().ok()
    }

    fn zero(&self) -> i32 {
        self.baseline.unwrap_or(self.adc_zero)
    }

    pub fn to_mv(&self, raw: i16) -> f64 {
        (f64::from(raw) - f64::from(self.zero())) / self.gain
    }

    pub fn to_raw(&self, mv: f64) -> i16 {
        let raw = (mv * self.gain + f64::from(self.zero())).round();
        raw.clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordHeader {
    pub record_name: String,
    pub sampling_rate: f64,
    pub num_samples: usize,
    pub signals: Vec<SignalSpec>,
    /// Comment lines in file order, split at the first colon.
    pub comments: Vec<(String, String)>,
}

impl RecordHeader {
    pub fn num_signals(&self) -> usize {
        self.signals.len()
    }

    /// Looks up a comment value; keys compare case-insensitively after trimming.
    pub fn comment(&self, key: &str) -> Option<&str> {
        let key = normalize_key(key);
        self.comments
            .iter()
            .find(|(k, _)| normalize_key(k) == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn lead_index(&self, lead: LeadId) -> Option<usize> {
        self.signals.iter().position(|s| s.lead() == Some(lead))
    }
}

fn normalize_key(k: &str) -> String {
    k.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase()
}

fn parse_num<T: FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse::<T>()
        .map_err(|_| Error::Format(format!("{what}: {field:?} is not numeric")))
}

/// Parses the text of a `.hea` file.
pub fn parse_header(text: &str) -> Result<RecordHeader> {
    let mut comments = Vec::new();
    let mut lines = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(c) = trimmed.strip_prefix('#') {
            let c = c.trim();
            if c.is_empty() {
                continue;
            }
            match c.split_once(':') {
                Some((k, v)) => comments.push((k.trim().to_string(), v.trim().to_string())),
                None => comments.push((c.to_string(), String::new())),
            }
        } else if !trimmed.is_empty() {
            lines.push(trimmed);
        }
    }

    let first = lines
        .first()
        .ok_or_else(|| Error::Format("header has no record line".into()))?;
    let fields: Vec<&str> = first.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(Error::Format(format!(
            "record line needs `name nsig fs nsamp`, got {first:?}"
        )));
    }
    let record_name = fields[0].to_string();
    if record_name.contains('/') {
        return Err(Error::Format("multi-segment records are not supported".into()));
    }
    let num_signals: usize = parse_num(fields[1], "number of signals")?;
    // fs may carry a counter frequency as `fs/counter`.
    let fs_field = fields[2].split('/').next().unwrap_or_default();
    let sampling_rate: f64 = parse_num(fs_field, "sampling rate")?;
    let num_samples: usize = parse_num(fields[3], "number of samples")?;
    if !(sampling_rate > 0.0) {
        return Err(Error::Format("sampling rate must be positive".into()));
    }
    if num_samples == 0 {
        return Err(Error::Format("number of samples must be positive".into()));
    }

    let signal_lines = &lines[1..];
    if signal_lines.len() != num_signals {
        return Err(Error::Format(format!(
            "header declares {num_signals} signals but has {} signal lines",
            signal_lines.len()
        )));
    }
    let signals = signal_lines
        .iter()
        .map(|l| parse_signal_line(l))
        .collect::<Result<Vec<_>>>()?;

    Ok(RecordHeader {
        record_name,
        sampling_rate,
        num_samples,
        signals,
        comments,
    })
}

fn parse_signal_line(line: &str) -> Result<SignalSpec> {
    let mut parts = line.splitn(9, char::is_whitespace).filter(|s| !s.is_empty());
    let file_name = parts
        .next()
        .ok_or_else(|| Error::Format("empty signal line".into()))?
        .to_string();
    let format_field = parts
        .next()
        .ok_or_else(|| Error::Format(format!("signal line {line:?} lacks a format")))?;
    let code: String = format_field.chars().take_while(char::is_ascii_digit).collect();
    if code != "16" {
        return Err(Error::UnsupportedFormat(format_field.to_string()));
    }

    // The remaining fields are whitespace separated except the description,
    // which runs to the end of the line. Re-split to keep it intact.
    let rest: Vec<&str> = line.split_whitespace().skip(2).collect();
    let (gain, baseline, units) = match rest.first() {
        Some(g) => parse_gain(g)?,
        None => (200.0, None, None),
    };
    if !(gain > 0.0) {
        return Err(Error::Format(format!("gain must be positive, got {gain}")));
    }
    let adc_resolution = match rest.get(1) {
        Some(f) => parse_num(f, "ADC resolution")?,
        None => 16,
    };
    let adc_zero = match rest.get(2) {
        Some(f) => parse_num(f, "ADC zero")?,
        None => 0,
    };
    let initial_value = match rest.get(3) {
        Some(f) => parse_num(f, "initial value")?,
        None => adc_zero,
    };
    let checksum = match rest.get(4) {
        Some(f) => Some(parse_num::<i32>(f, "checksum")? as i16),
        None => None,
    };
    let block_size = match rest.get(5) {
        Some(f) => parse_num(f, "block size")?,
        None => 0,
    };
    let lead_name = if rest.len() > 6 {
        rest[6..].join(" ")
    } else {
        String::new()
    };

    Ok(SignalSpec {
        file_name,
        gain,
        baseline,
        units,
        adc_resolution,
        adc_zero,
        initial_value,
        checksum,
        block_size,
        lead_name,
    })
}

/// `gain[(baseline)][/units]`
fn parse_gain(field: &str) -> Result<(f64, Option<i32>, Option<String>)> {
    let (head, units) = match field.split_once('/') {
        Some((h, u)) => (h, Some(u.to_string())),
        None => (field, None),
    };
    let (gain_str, baseline) = match head.split_once('(') {
        Some((g, b)) => {
            let b = b.trim_end_matches(')');
            (g, Some(parse_num(b, "baseline")?))
        }
        None => (head, None),
    };
    Ok((parse_num(gain_str, "gain")?, baseline, units))
}

/// Renders a header in canonical WFDB text form.
pub fn write_header(header: &RecordHeader) -> String {
    let mut out = format!(
        "{} {} {} {}\n",
        header.record_name,
        header.num_signals(),
        header.sampling_rate,
        header.num_samples
    );
    for s in &header.signals {
        let mut gain = format!("{}", s.gain);
        if let Some(b) = s.baseline {
            gain.push_str(&format!("({b})"));
        }
        if let Some(u) = &s.units {
            gain.push('/');
            gain.push_str(u);
        }
        out.push_str(&format!(
            "{} 16 {} {} {} {} {} {} {}\n",
            s.file_name,
            gain,
            s.adc_resolution,
            s.adc_zero,
            s.initial_value,
            s.checksum.unwrap_or(0),
            s.block_size,
            s.lead_name
        ));
    }
    for (k, v) in &header.comments {
        if v.is_empty() {
            out.push_str(&format!("# {k}:\n"));
        } else {
            out.push_str(&format!("# {k}: {v}\n"));
        }
    }
    out
}

/// A calibrated multi-channel recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub header: RecordHeader,
    /// Row-major `[num_samples x num_signals]`, millivolts.
    samples: Vec<f64>,
}

impl SignalRecord {
    pub fn new(header: RecordHeader, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != header.num_samples * header.num_signals() {
            return Err(Error::Shape(format!(
                "{} samples for a {}x{} record",
                samples.len(),
                header.num_samples,
                header.num_signals()
            )));
        }
        Ok(SignalRecord { header, samples })
    }

    pub fn name(&self) -> &str {
        &self.header.record_name
    }

    pub fn num_samples(&self) -> usize {
        self.header.num_samples
    }

    pub fn num_channels(&self) -> usize {
        self.header.num_signals()
    }

    pub fn sampling_rate(&self) -> f64 {
        self.header.sampling_rate
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, t: usize, ch: usize) -> f64 {
        self.samples[t * self.num_channels() + ch]
    }

    pub fn channel(&self, ch: usize) -> Vec<f64> {
        let c = self.num_channels();
        self.samples.iter().skip(ch).step_by(c).copied().collect()
    }

    pub fn leads(&self) -> Vec<Option<LeadId>> {
        self.header.signals.iter().map(SignalSpec::lead).collect()
    }

    pub fn lead_names(&self) -> Vec<String> {
        self.header.signals.iter().map(|s| s.lead_name.clone()).collect()
    }

    /// Builds a record from per-channel columns.
    pub fn from_channels(header: RecordHeader, channels: &[Vec<f64>]) -> Result<Self> {
        let n = header.num_samples;
        if channels.len() != header.num_signals() || channels.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("channel columns do not match header".into()));
        }
        let c = channels.len();
        let mut samples = vec![0.0; n * c];
        for (j, col) in channels.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                samples[t * c + j] = v;
            }
        }
        SignalRecord::new(header, samples)
    }
}

/// Sum of raw samples modulo 2^16, as WFDB stores it.
pub fn checksum(raw: impl IntoIterator<Item = i16>) -> i16 {
    raw.into_iter()
        .fold(0u16, |acc, v| acc.wrapping_add(v as u16)) as i16
}

/// Decodes format-16 signal bytes and verifies per-channel checksums.
pub fn read_signal(header: &RecordHeader, bytes: &[u8]) -> Result<SignalRecord> {
    let c = header.num_signals();
    let n = header.num_samples;
    let expected = 2 * n * c;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "signal file has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let raw: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    for (ch, spec) in header.signals.iter().enumerate() {
        if let Some(expected) = spec.checksum {
            let actual = checksum(raw.iter().skip(ch).step_by(c).copied());
            if actual != expected {
                return Err(Error::Checksum {
                    channel: ch,
                    expected,
                    actual,
                });
            }
        }
    }
    let samples = raw
        .iter()
        .enumerate()
        .map(|(i, &r)| header.signals[i % c].to_mv(r))
        .collect();
    SignalRecord::new(header.clone(), samples)
}

/// Quantizes a record back to format-16 bytes.
pub fn encode_signal(record: &SignalRecord) -> Vec<u8> {
    let c = record.num_channels();
    let mut out = Vec::with_capacity(record.samples.len() * 2);
    for (i, &v) in record.samples.iter().enumerate() {
        out.extend_from_slice(&record.header.signals[i % c].to_raw(v).to_le_bytes());
    }
    out
}

/// Recomputes initial values and checksums from the quantized samples.
pub fn refresh_checksums(record: &mut SignalRecord) {
    let c = record.num_channels();
    for ch in 0..c {
        let spec = &record.header.signals[ch];
        let raw: Vec<i16> = record
            .samples
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|&v| spec.to_raw(v))
            .collect();
        let sum = checksum(raw.iter().copied());
        let first = raw.first().copied().unwrap_or(0);
        let spec = &mut record.header.signals[ch];
        spec.checksum = Some(sum);
        spec.initial_value = i32::from(first);
    }
}

/// Reads `<dir>/<name>.hea` and the signal file it references.
pub fn read_record(dir: &Path, name: &str) -> Result<SignalRecord> {
    let text = fs::read_to_string(dir.join(format!("{name}.hea")))?;
    let header = parse_header(&text)?;
    let file = &header.signals[0].file_name;
    if header.signals.iter().any(|s| &s.file_name != file) {
        return Err(Error::Format("signals spread over several files".into()));
    }
    let bytes = fs::read(dir.join(file))?;
    read_signal(&header, &bytes)
}

/// Writes `<dir>/<name>.hea` and `<dir>/<name>.dat`, refreshing checksums.
pub fn write_record(dir: &Path, record: &SignalRecord) -> Result<()> {
    let mut record = record.clone();
    let dat = format!("{}.dat", record.name());
    for s in &mut record.header.signals {
        s.file_name = dat.clone();
    }
    refresh_checksums(&mut record);
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(format!("{}.hea", record.name())),
        write_header(&record.header),
    )?;
    fs::write(dir.join(dat), encode_signal(&record))?;
    Ok(())
}

fn limb_channel(record: &SignalRecord, lead: LeadId) -> Result<Vec<f64>> {
    let (a, b) = lead.limb_coefficients().ok_or(Error::MissingLead(lead))?;
    let i = record
        .header
        .lead_index(LeadId::I)
        .ok_or(Error::MissingLead(LeadId::I))?;
    let ii = record
        .header
        .lead_index(LeadId::II)
        .ok_or(Error::MissingLead(LeadId::II))?;
    Ok((0..record.num_samples())
        .map(|t| {
            let (x1, x2) = (record.get(t, i), record.get(t, ii));
            match lead {
                // Einthoven's law written as a difference keeps it exact.
                LeadId::III => x2 - x1,
                _ => a * x1 + b * x2,
            }
        })
        .collect())
}

/// Appends III, aVR, aVL and aVF computed from I and II. Leads that are
/// already stored are kept as they are.
pub fn derive_limb_leads(record: &SignalRecord) -> Result<SignalRecord> {
    let template_idx = record
        .header
        .lead_index(LeadId::I)
        .ok_or(Error::MissingLead(LeadId::I))?;
    record
        .header
        .lead_index(LeadId::II)
        .ok_or(Error::MissingLead(LeadId::II))?;

    let mut header = record.header.clone();
    let mut columns: Vec<Vec<f64>> = (0..record.num_channels()).map(|c| record.channel(c)).collect();
    for lead in [LeadId::III, LeadId::AVR, LeadId::AVL, LeadId::AVF] {
        if record.header.lead_index(lead).is_some() {
            continue;
        }
        let mut spec = record.header.signals[template_idx].clone();
        spec.lead_name = lead.wfdb_name().to_string();
        header.signals.push(spec);
        columns.push(limb_channel(record, lead)?);
    }
    if header.signals.len() == record.num_channels() {
        return Ok(record.clone());
    }
    let mut out = SignalRecord::from_channels(header, &columns)?;
    refresh_checksums(&mut out);
    Ok(out)
}

/// Reduces a record to a lead subset in canonical order, deriving limb leads
/// from I and II when they are not stored.
pub fn select_channels(record: &SignalRecord, set: ChannelSet) -> Result<SignalRecord> {
    let leads = set.leads();
    let mut columns = Vec::with_capacity(leads.len());
    let mut signals = Vec::with_capacity(leads.len());
    for lead in leads {
        if let Some(idx) = record.header.lead_index(lead) {
            columns.push(record.channel(idx));
            signals.push(record.header.signals[idx].clone());
        } else if lead.is_derivable_limb() {
            let col = limb_channel(record, lead).map_err(|_| Error::MissingLead(lead))?;
            let i = record.header.lead_index(LeadId::I).ok_or(Error::MissingLead(lead))?;
            let mut spec = record.header.signals[i].clone();
            spec.lead_name = lead.wfdb_name().to_string();
            columns.push(col);
            signals.push(spec);
        } else {
            return Err(Error::MissingLead(lead));
        }
    }
    let mut header = record.header.clone();
    header.signals = signals;
    let mut out = SignalRecord::from_channels(header, &columns)?;
    refresh_checksums(&mut out);
    Ok(out)
}

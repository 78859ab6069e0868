//! Synthetic multi-lead ECG records built from Gaussian-bump beat templates.
//!
//! Healthy and infarction records share one generator path: the record with
//! index `k` of either class draws from the same random stream, and the
//! pathology (an ST-segment offset and deeper Q waves on a lead subset) is
//! applied without consuming randomness. Limb leads III, aVR, aVL and aVF are
//! computed from the noisy I and II before quantization, as a recorder
//! storing all six would.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{entry_from_header, Localization, RecordEntry};
use crate::error::{Error, Result};
use crate::wfdb::{refresh_checksums, select_channels, write_record, ChannelSet, LeadId, RecordHeader, SignalRecord, SignalSpec};

/// ADC units per millivolt of exported records.
pub const GAIN: f64 = 2000.0;

/// ST segment relative to the R peak, seconds.
pub const ST_WINDOW: (f64, f64) = (0.06, 0.16);

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub patients_per_class: usize,
    pub records_per_patient: usize,
    pub sampling_rate: f64,
    pub duration_seconds: f64,
    /// Uniform range of per-record heart rates, beats per minute.
    pub heart_rate_bpm: (f64, f64),
    /// Relative beat-to-beat jitter of the RR interval.
    pub rr_jitter: f64,
    pub channels: ChannelSet,
    /// ST offset in mV added on affected leads of infarction records.
    pub st_offset_mv: f64,
    /// Q-wave amplitude multiplier on affected leads.
    pub q_factor: f64,
    /// Affected leads of anterior infarctions.
    pub anterior_leads: Vec<LeadId>,
    /// Affected leads of inferior infarctions.
    pub inferior_leads: Vec<LeadId>,
    pub noise_std_mv: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients_per_class: 40,
            records_per_patient: 1,
            sampling_rate: 1000.0,
            duration_seconds: 8.0,
            heart_rate_bpm: (55.0, 95.0),
            rr_jitter: 0.03,
            channels: ChannelSet::All15,
            st_offset_mv: 0.2,
            q_factor: 2.0,
            anterior_leads: vec![LeadId::I, LeadId::V1, LeadId::V2, LeadId::V3, LeadId::V4],
            inferior_leads: vec![LeadId::II, LeadId::Vy],
            noise_std_mv: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.patients_per_class == 0 || self.records_per_patient == 0 {
            return bad("need at least one patient and record");
        }
        if !(self.sampling_rate > 0.0) || !(self.duration_seconds > 0.0) {
            return bad("sampling rate and duration must be positive");
        }
        let (lo, hi) = self.heart_rate_bpm;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("heart-rate range must be positive and ordered");
        }
        if !(0.0..0.5).contains(&self.rr_jitter) {
            return bad("rr jitter must lie in [0, 0.5)");
        }
        if !(self.st_offset_mv >= 0.0) || !(self.noise_std_mv >= 0.0) || !(self.q_factor >= 0.0) {
            return bad("ST offset, Q factor and noise must be non-negative");
        }
        if let Some(l) = self
            .anterior_leads
            .iter()
            .chain(&self.inferior_leads)
            .find(|l| l.is_derivable_limb())
        {
            return bad(&format!("{l} is computed from I and II and cannot be affected directly"));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_seconds * self.sampling_rate).round() as usize
    }
}

/// Leads generated independently; the remaining limb leads are derived.
const SOURCE_LEADS: [LeadId; 11] = [
    LeadId::I,
    LeadId::II,
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

/// P, Q, R, S, T amplitudes (mV, signed) of a source lead.
fn template(lead: LeadId) -> [f64; 5] {
    match lead {
        LeadId::I => [0.10, -0.06, 0.80, -0.10, 0.20],
        LeadId::II => [0.15, -0.08, 1.10, -0.15, 0.30],
        LeadId::V1 => [0.05, 0.00, 0.30, -0.90, -0.10],
        LeadId::V2 => [0.08, 0.00, 0.50, -1.10, 0.30],
        LeadId::V3 => [0.08, -0.03, 0.80, -0.70, 0.35],
        LeadId::V4 => [0.10, -0.05, 1.20, -0.40, 0.35],
        LeadId::V5 => [0.10, -0.06, 1.10, -0.20, 0.30],
        LeadId::V6 => [0.10, -0.06, 0.90, -0.10, 0.25],
        LeadId::Vx => [0.08, -0.05, 0.90, -0.20, 0.20],
        LeadId::Vy => [0.10, -0.05, 1.00, -0.15, 0.25],
        LeadId::Vz => [0.05, -0.02, 0.50, -0.60, -0.15],
        _ => unreachable!("derived lead"),
    }
}

/// Centers (s, relative to R) and widths (s) of P, Q, R, S, T.
const WAVES: [(f64, f64); 5] = [(-0.16, 0.025), (-0.03, 0.008), (0.0, 0.010), (0.03, 0.008), (0.26, 0.040)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pathology {
    None,
    Infarction(Localization),
}

/// R-peak times of a record, in seconds.
pub fn beat_times<R: Rng + ?Sized>(cfg: &SynthConfig, rr: f64, rng: &mut R) -> Vec<f64> {
    let mut t = -rng.random::<f64>() * rr;
    let mut out = Vec::new();
    while t < cfg.duration_seconds + 1.0 {
        out.push(t);
        t += rr * (1.0 + cfg.rr_jitter * (2.0 * rng.random::<f64>() - 1.0));
    }
    out
}

fn record_name(index: usize) -> String {
    format!("s{:04}_sy", index)
}

fn patient_name(index: usize) -> String {
    format!("patient{:03}", index + 1)
}

fn build_header(cfg: &SynthConfig, name: &str, n: usize, pathology: Pathology, day: usize) -> RecordHeader {
    let signals = LeadId::ALL
        .iter()
        .map(|l| SignalSpec {
            file_name: format!("{name}.dat"),
            gain: GAIN,
            baseline: None,
            units: Some("mV".into()),
            adc_resolution: 16,
            adc_zero: 0,
            initial_value: 0,
            checksum: None,
            block_size: 0,
            lead_name: l.wfdb_name().to_string(),
        })
        .collect();
    let mut comments = vec![("ECG date".to_string(), format!("{:02}/01/2000", 1 + day % 28))];
    match pathology {
        Pathology::None => comments.push(("Reason for admission".into(), "Healthy control".into())),
        Pathology::Infarction(loc) => {
            comments.push(("Reason for admission".into(), "Myocardial infarction".into()));
            comments.push(("Acute infarction (localization)".into(), loc.name().into()));
        }
    }
    RecordHeader {
        record_name: name.to_string(),
        sampling_rate: cfg.sampling_rate,
        num_samples: n,
        signals,
        comments,
    }
}

/// Synthesizes one 15-lead record. `stream` selects the random stream, so
/// equal streams give equal beats and noise whatever the pathology.
pub fn synth_record(cfg: &SynthConfig, name: &str, stream: u64, pathology: Pathology, day: usize) -> Result<SignalRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let n = cfg.num_samples();
    let fs = cfg.sampling_rate;
    let (lo, hi) = cfg.heart_rate_bpm;
    let bpm = lo + (hi - lo) * rng.random::<f64>();
    let scales: Vec<f64> = SOURCE_LEADS.iter().map(|_| 0.8 + 0.4 * rng.random::<f64>()).collect();
    let beats = beat_times(cfg, 60.0 / bpm, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std_mv.max(f64::MIN_POSITIVE)).expect("finite std");

    let affected: &[LeadId] = match pathology {
        Pathology::None => &[],
        Pathology::Infarction(loc) => match loc.group() {
            crate::dataset::Group::Ami => &cfg.anterior_leads,
            _ => &cfg.inferior_leads,
        },
    };

    let mut source: Vec<Vec<f64>> = Vec::with_capacity(SOURCE_LEADS.len());
    for (li, &lead) in SOURCE_LEADS.iter().enumerate() {
        let mut amp = template(lead).map(|a| a * scales[li]);
        let hit = affected.contains(&lead);
        if hit {
            amp[1] *= cfg.q_factor;
        }
        let mut col = vec![0.0; n];
        for &r in &beats {
            for (wave, &(center, width)) in WAVES.iter().enumerate() {
                let c = r + center;
                let lo = (((c - 5.0 * width) * fs).floor().max(0.0)) as usize;
                let hi = (((c + 5.0 * width) * fs).ceil().max(0.0) as usize).min(n);
                for (t, v) in col.iter_mut().enumerate().take(hi).skip(lo) {
                    let z = (t as f64 / fs - c) / width;
                    *v += amp[wave] * (-0.5 * z * z).exp();
                }
            }
            if hit {
                for (t, v) in col.iter_mut().enumerate() {
                    let s = t as f64 / fs - r;
                    if (ST_WINDOW.0..ST_WINDOW.1).contains(&s) {
                        *v += cfg.st_offset_mv;
                    }
                }
            }
        }
        if cfg.noise_std_mv > 0.0 {
            col.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        source.push(col);
    }

    let (i, ii) = (&source[0], &source[1]);
    let quant = |v: f64| (v * GAIN).round() / GAIN;
    let columns: Vec<Vec<f64>> = LeadId::ALL
        .iter()
        .map(|&lead| {
            let raw: Vec<f64> = match SOURCE_LEADS.iter().position(|&s| s == lead) {
                Some(k) => source[k].clone(),
                None => (0..n)
                    .map(|t| match lead {
                        LeadId::III => ii[t] - i[t],
                        LeadId::AVR => -(i[t] + ii[t]) / 2.0,
                        LeadId::AVL => i[t] - ii[t] / 2.0,
                        LeadId::AVF => ii[t] - i[t] / 2.0,
                        _ => unreachable!("source lead"),
                    })
                    .collect(),
            };
            raw.into_iter().map(quant).collect()
        })
        .collect();

    let mut record = SignalRecord::from_channels(build_header(cfg, name, n, pathology, day), &columns)?;
    refresh_checksums(&mut record);
    Ok(record)
}

/// Healthy patients come first, then infarction patients alternating
/// between anterior and inferior localization.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<(SignalRecord, RecordEntry)>> {
    cfg.validate()?;
    let per_class = cfg.patients_per_class;
    let rpp = cfg.records_per_patient;
    let jobs: Vec<(usize, usize)> = (0..2 * per_class).flat_map(|p| (0..rpp).map(move |r| (p, r))).collect();
    jobs.into_par_iter()
        .map(|(p, r)| {
            let (class_index, pathology) = if p < per_class {
                (p, Pathology::None)
            } else {
                let k = p - per_class;
                let loc = if k.is_multiple_of(2) { Localization::Anterior } else { Localization::Inferior };
                (k, Pathology::Infarction(loc))
            };
            let stream = (class_index * rpp + r) as u64;
            let name = record_name(p * rpp + r);
            let full = synth_record(cfg, &name, stream, pathology, r)?;
            let mut record = select_channels(&full, cfg.channels)?;
            refresh_checksums(&mut record);
            let entry = entry_from_header(&patient_name(p), &record.header)
                .ok_or_else(|| Error::Data(format!("generated record {name} has no label")))?;
            Ok((record, entry))
        })
        .collect()
}

/// Writes records as `<root>/<patient>/<record>.{hea,dat}`.
pub fn export(root: &Path, data: &[(SignalRecord, RecordEntry)]) -> Result<()> {
    for (record, entry) in data {
        write_record(&root.join(&entry.patient_id), record)?;
    }
    Ok(())
}

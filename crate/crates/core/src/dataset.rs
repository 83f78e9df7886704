//! JSON-lines manifests, the seeded synthetic corpus and epoch batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::SAMPLE_RATE;
use crate::dsp::write_wav_stereo;
use crate::error::{Error, Result};

pub const MANIFEST_KEYS: [&str; 9] = [
    "id",
    "audio",
    "emb_l",
    "emb_r",
    "intelligibility",
    "haspi",
    "ha_class",
    "track",
    "split",
];
pub const N_HA_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emb_l: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emb_r: Option<PathBuf>,
    /// Percent words correct, 0–100.
    pub intelligibility: f64,
    /// 0–1.
    pub haspi: f64,
    pub ha_class: usize,
    pub track: u8,
    pub split: Split,
}

impl UtteranceRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !(0.0..=100.0).contains(&self.intelligibility) {
            return Err(format!("intelligibility {} outside [0, 100]", self.intelligibility));
        }
        if !(0.0..=1.0).contains(&self.haspi) {
            return Err(format!("haspi {} outside [0, 1]", self.haspi));
        }
        if self.ha_class >= N_HA_CLASSES {
            return Err(format!("ha_class {} outside 0..{}", self.ha_class, N_HA_CLASSES - 1));
        }
        if !(1..=3).contains(&self.track) {
            return Err(format!("track {} not in 1..3", self.track));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub source: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Manifest {
        self.filter(|r| r.split == split)
    }

    pub fn track(&self, track: Option<u8>) -> Manifest {
        self.filter(|r| track.is_none_or(|t| r.track == t))
    }

    pub fn filter(&self, f: impl Fn(&UtteranceRecord) -> bool) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| f(r)).cloned().collect(),
            source: self.source.clone(),
        }
    }

    pub fn track_counts(&self) -> BTreeMap<u8, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.track).or_default() += 1;
        }
        m
    }

    /// Relative paths in a manifest are resolved against its directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        self.source.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serialises"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_manifest_str(text: &str, source: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest {
            path: source.to_path_buf(),
            line: line_no,
            msg,
        };
        let obj: Map<String, Value> = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        for k in obj.keys() {
            if !MANIFEST_KEYS.contains(&k.as_str()) {
                log::warn!("{}:{line_no}: ignoring unknown key `{k}`", source.display());
            }
        }
        for k in ["id", "audio", "intelligibility", "haspi", "ha_class", "track", "split"] {
            if !obj.contains_key(k) {
                return Err(err(format!("missing required key `{k}`")));
            }
        }
        let known: Map<String, Value> = obj
            .into_iter()
            .filter(|(k, v)| MANIFEST_KEYS.contains(&k.as_str()) && !v.is_null())
            .collect();
        let rec: UtteranceRecord = serde_json::from_value(Value::Object(known)).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        if !ids.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id `{}`", rec.id)));
        }
        records.push(rec);
    }
    let m = Manifest {
        records,
        source: source.to_path_buf(),
    };
    log::info!("{}: {} records, per track {:?}", source.display(), m.len(), m.track_counts());
    Ok(m)
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text, path)
}

/// Label function of the synthetic corpus, monotone in SNR.
pub fn pseudo_intelligibility(snr_db: f64) -> f64 {
    let v = 100.0 / (1.0 + (-(0.5 * snr_db - 2.0)).exp());
    (v.clamp(0.0, 100.0) * 10.0).round() / 10.0
}

pub const SYNTH_SNR_DB: (f64, f64) = (-5.0, 15.0);
const SPEECH_RMS: f64 = 0.1;
const MIX_RMS: f64 = 0.1;

/// Harmonic "voice" with a slow envelope, plus white noise at a random
/// SNR, with independent noise per ear.
fn synth_signal(rng: &mut ChaCha8Rng, len: usize, snr_db: f64) -> (Vec<f64>, Vec<f64>) {
    let sr = SAMPLE_RATE as f64;
    let f0 = rng.gen_range(150.0..350.0);
    let n_harm = ((4000.0 / f0) as usize).max(1);
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let am_rate = rng.gen_range(3.0..6.0);
    let mut voice: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * am_rate * t).sin();
            env * phases
                .iter()
                .enumerate()
                .map(|(k, ph)| (std::f64::consts::TAU * f0 * (k + 1) as f64 * t + ph).sin() / (k + 1) as f64)
                .sum::<f64>()
        })
        .collect();
    let rms = (voice.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
    voice.iter_mut().for_each(|v| *v *= SPEECH_RMS / rms);
    let noise_rms = SPEECH_RMS * 10f64.powf(-snr_db / 20.0);
    // Each mixture is brought to a fixed level so SNR shows up in the
    // spectral shape only, not in loudness.
    let mut ear = |gain: f64| -> Vec<f64> {
        let mix: Vec<f64> = voice
            .iter()
            .map(|v| {
                let n: f64 = rng.sample(StandardNormal);
                v + noise_rms * n
            })
            .collect();
        let rms = (mix.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
        mix.iter().map(|v| (v * gain * MIX_RMS / rms).clamp(-1.0, 1.0)).collect()
    };
    let l = ear(1.0);
    let r = ear(0.9);
    (l, r)
}

/// Writes `n` stereo WAVs under `out_dir/wav/` and `out_dir/manifest.jsonl`.
pub fn synth_corpus(seed: u64, n: usize, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus needs n ≥ 1".into()));
    }
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let snr = rng.gen_range(SYNTH_SNR_DB.0..SYNTH_SNR_DB.1);
        let len = rng.gen_range(2 * SAMPLE_RATE as usize..=7 * SAMPLE_RATE as usize);
        let (l, r) = synth_signal(&mut rng, len, snr);
        let id = format!("synth_{i:04}");
        let rel = PathBuf::from("wav").join(format!("{id}.wav"));
        write_wav_stereo(&out_dir.join(&rel), &l, &r, SAMPLE_RATE)?;
        let intelligibility = pseudo_intelligibility(snr);
        records.push(UtteranceRecord {
            id,
            audio: rel,
            emb_l: None,
            emb_r: None,
            intelligibility,
            haspi: intelligibility / 100.0,
            ha_class: i % N_HA_CLASSES,
            track: (i % 3 + 1) as u8,
            split: if n >= 16 && i % 4 == 3 { Split::Dev } else { Split::Train },
        });
    }
    let m = Manifest {
        records,
        source: out_dir.join("manifest.jsonl"),
    };
    m.write(&m.source)?;
    Ok(m)
}

/// Seeded per-epoch shuffle of `0..n` cut into groups of `batch_size`.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One entry of a challenge-style JSON listing.
#[derive(Clone, Debug, Deserialize)]
pub struct CpcEntry {
    pub signal: String,
    pub correctness: f64,
    pub system: String,
    #[serde(default)]
    pub haspi: Option<f64>,
}

/// Converts a challenge-style JSON array to manifest records. Systems are
/// mapped to class indices in sorted name order; `audio` is
/// `<audio_dir>/<signal>.wav`. Without a HASPI field the label falls back
/// to `correctness / 100`.
pub fn convert_cpc(json: &str, audio_dir: &Path, track: u8, split: Split) -> Result<Vec<UtteranceRecord>> {
    let entries: Vec<CpcEntry> =
        serde_json::from_str(json).map_err(|e| Error::Label(format!("challenge listing: {e}")))?;
    let systems: BTreeSet<&str> = entries.iter().map(|e| e.system.as_str()).collect();
    if systems.len() > N_HA_CLASSES {
        return Err(Error::Label(format!("{} systems, at most {N_HA_CLASSES} supported", systems.len())));
    }
    let class_of: BTreeMap<&str, usize> = systems.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut seen = BTreeMap::<String, usize>::new();
    entries
        .iter()
        .map(|e| {
            // The same signal can be rated by several listeners.
            let n = seen.entry(e.signal.clone()).or_default();
            let id = if *n == 0 { e.signal.clone() } else { format!("{}#{n}", e.signal) };
            *n += 1;
            let rec = UtteranceRecord {
                id,
                audio: audio_dir.join(format!("{}.wav", e.signal)),
                emb_l: None,
                emb_r: None,
                intelligibility: e.correctness,
                haspi: e.haspi.unwrap_or(e.correctness / 100.0),
                ha_class: class_of[e.system.as_str()],
                track,
                split,
            };
            rec.validate().map_err(Error::Label)?;
            Ok(rec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, int: f64) -> String {
        format!(
            r#"{{"id":"{id}","audio":"a.wav","intelligibility":{int},"haspi":0.5,"ha_class":3,"track":2,"split":"train"}}"#
        )
    }

    #[test]
    fn parses_valid_lines() {
        let text = [line("a", 10.0), line("b", 20.0), line("c", 30.0)].join("\n");
        let m = parse_manifest_str(&text, Path::new("m.jsonl")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.track_counts()[&2], 3);
    }

    #[test]
    fn range_error_reports_line() {
        let text = [line("a", 10.0), line("b", 101.0)].join("\n");
        let e = parse_manifest_str(&text, Path::new("m.jsonl")).unwrap_err();
        assert!(matches!(e, Error::Manifest { line: 2, .. }), "{e}");
    }

    #[test]
    fn duplicate_and_missing_keys() {
        let text = [line("a", 10.0), line("a", 20.0)].join("\n");
        let e = parse_manifest_str(&text, Path::new("m.jsonl")).unwrap_err().to_string();
        assert!(e.contains("duplicate id `a`"), "{e}");
        let e = parse_manifest_str(r#"{"id":"x"}"#, Path::new("m.jsonl")).unwrap_err().to_string();
        assert!(e.contains("missing required key"), "{e}");
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let l = line("a", 1.0).replace("}", r#","listener":"L01","emb_l":null}"#);
        let m = parse_manifest_str(&l, Path::new("m.jsonl")).unwrap();
        assert_eq!(m.records[0].emb_l, None);
    }

    #[test]
    fn fuzzed_lines_never_yield_invalid_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut accepted = 0;
        for i in 0..10_000 {
            let l = format!(
                r#"{{"id":"u{i}","audio":"a.wav","intelligibility":{},"haspi":{},"ha_class":{},"track":{},"split":"{}"}}"#,
                rng.gen_range(-20.0..120.0),
                rng.gen_range(-0.2..1.2),
                rng.gen_range(-2i64..13),
                rng.gen_range(-1i64..5),
                ["train", "dev", "test", "eval"][rng.gen_range(0..4)],
            );
            if let Ok(m) = parse_manifest_str(&l, Path::new("f.jsonl")) {
                assert!(m.records[0].validate().is_ok());
                accepted += 1;
            }
        }
        assert!(accepted > 0);
    }

    #[test]
    fn pseudo_label_closed_form() {
        assert_eq!(pseudo_intelligibility(20.0), 100.0);
        let raw = 100.0 / (1.0 + (-8.0f64).exp());
        assert!((raw - 99.966).abs() < 1e-3);
        assert_eq!(pseudo_intelligibility(4.0), 50.0);
        assert!(pseudo_intelligibility(-40.0) >= 0.0);
    }

    #[test]
    fn synth_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_corpus(7, 10, a.path()).unwrap();
        let mb = synth_corpus(7, 10, b.path()).unwrap();
        assert_eq!(ma.to_jsonl(), mb.to_jsonl());
        for r in &ma.records {
            let x = std::fs::read(a.path().join(&r.audio)).unwrap();
            let y = std::fs::read(b.path().join(&r.audio)).unwrap();
            assert_eq!(x, y);
        }
        let classes: BTreeSet<usize> = ma.records.iter().map(|r| r.ha_class).collect();
        assert_eq!(classes.len(), 10);
        let reparsed = parse_manifest(&ma.source).unwrap();
        assert_eq!(reparsed.records, ma.records);
        let (l, _) = crate::dsp::ingest::<f32>(&ma.resolve(&ma.records[0].audio)).unwrap();
        let secs = l.len() as f64 / 16_000.0;
        assert!((2.0..=7.0).contains(&secs));
    }

    #[test]
    fn batches_cover_and_shuffle() {
        let b = batches(37, 4, 9, 0);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert_eq!(b, batches(37, 4, 9, 0));
        let distinct = (1..=100).filter(|&e| batches(37, 4, 9, e) != b).count();
        assert_eq!(distinct, 100);
    }

    #[test]
    fn cpc_conversion() {
        let json = r#"[{"signal":"S1","correctness":80.0,"system":"E009"},
                       {"signal":"S1","correctness":60.0,"system":"E009"},
                       {"signal":"S2","correctness":20.0,"system":"E001","haspi":0.3}]"#;
        let r = convert_cpc(json, Path::new("/x"), 1, Split::Train).unwrap();
        assert_eq!(r[0].ha_class, 1);
        assert_eq!(r[2].ha_class, 0);
        assert_eq!(r[0].haspi, 0.8);
        assert_eq!(r[2].haspi, 0.3);
        assert_eq!(r[1].id, "S1#1");
        assert_eq!(r[0].audio, Path::new("/x/S1.wav"));
    }
}

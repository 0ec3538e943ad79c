//! File formats: spectrogram clips, activation tracks, beat annotations,
//! key=value configs, and run manifests.
//!
//! Binary layouts (little-endian throughout):
//!   BSPC: magic "BSPC" | version u32 | T u64 | C u64 | F u64 | fps f64 |
//!         per channel: name length u32 + UTF-8 | T*C*F f32 (log1p values)
//!   BACT: magic "BACT" | version u32 | T u64 | fps f64 |
//!         T x (beat f32, downbeat f32) | 300 f32 tempo
//! Annotations are text: one "<time_seconds>\t<position_in_bar>" line per
//! beat, '#' starts a comment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ActivationTrack, DemixedClip};
use crate::targets::{Annotation, TEMPO_CLASSES};
use crate::tensor::Tensor;

const BSPC_MAGIC: &[u8; 4] = b"BSPC";
const BACT_MAGIC: &[u8; 4] = b"BACT";
const FORMAT_VERSION: u32 = 1;

// ── primitives ──────────────────────────────────────────────────────

fn read_exact4(r: &mut impl Read) -> Result<[u8; 4]> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact4(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    Ok(f32::from_le_bytes(read_exact4(r)?))
}

/// FNV-1a 64-bit hash, used for reproducibility checksums.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn file_checksum(path: &Path) -> Result<u64> {
    Ok(fnv1a(&std::fs::read(path)?))
}

// ── spectrogram clips (BSPC) ────────────────────────────────────────

pub fn save_clip(clip: &DemixedClip, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BSPC_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(clip.frames() as u64).to_le_bytes())?;
    w.write_all(&(clip.channels() as u64).to_le_bytes())?;
    w.write_all(&(clip.mel_bins() as u64).to_le_bytes())?;
    w.write_all(&clip.fps.to_le_bytes())?;
    for name in &clip.channel_names {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    for &v in clip.values.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<DemixedClip> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact4(&mut r)? != BSPC_MAGIC {
        return Err(Error::Format(format!("{} is not a BSPC file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported BSPC version {version}")));
    }
    let t = read_u64(&mut r)? as usize;
    let c = read_u64(&mut r)? as usize;
    let f = read_u64(&mut r)? as usize;
    let fps = read_f64(&mut r)?;
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        names.push(
            String::from_utf8(buf).map_err(|_| Error::Format("channel name not UTF-8".into()))?,
        );
    }
    let mut data = Vec::with_capacity(t * c * f);
    for _ in 0..t * c * f {
        data.push(read_f32(&mut r)? as f64);
    }
    DemixedClip::new(Tensor::new(vec![t, c, f], data)?, fps, names)
}

// ── activation tracks (BACT) ────────────────────────────────────────

pub fn save_activations(acts: &ActivationTrack, path: &Path) -> Result<()> {
    if acts.tempo.len() != TEMPO_CLASSES {
        return Err(Error::Shape(format!(
            "tempo distribution must have {TEMPO_CLASSES} classes, got {}",
            acts.tempo.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BACT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(acts.beat.len() as u64).to_le_bytes())?;
    w.write_all(&acts.fps.to_le_bytes())?;
    for (&b, &d) in acts.beat.iter().zip(&acts.downbeat) {
        w.write_all(&(b as f32).to_le_bytes())?;
        w.write_all(&(d as f32).to_le_bytes())?;
    }
    for &v in &acts.tempo {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_activations(path: &Path) -> Result<ActivationTrack> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact4(&mut r)? != BACT_MAGIC {
        return Err(Error::Format(format!("{} is not a BACT file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported BACT version {version}")));
    }
    let t = read_u64(&mut r)? as usize;
    let fps = read_f64(&mut r)?;
    let mut beat = Vec::with_capacity(t);
    let mut downbeat = Vec::with_capacity(t);
    for _ in 0..t {
        beat.push(read_f32(&mut r)? as f64);
        downbeat.push(read_f32(&mut r)? as f64);
    }
    let mut tempo = Vec::with_capacity(TEMPO_CLASSES);
    for _ in 0..TEMPO_CLASSES {
        tempo.push(read_f32(&mut r)? as f64);
    }
    // f32 storage perturbs the tempo sum; renormalize to the contract
    let sum: f64 = tempo.iter().sum();
    if sum > 0.0 {
        for v in tempo.iter_mut() {
            *v /= sum;
        }
    }
    Ok(ActivationTrack {
        beat,
        downbeat,
        tempo,
        fps,
    })
}

// ── beat annotations (text) ─────────────────────────────────────────

/// Write "<time>\t<position>" lines.
pub fn save_beats(events: &[(f64, usize)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for &(time, position) in events {
        out.push_str(&format!("{time:.6}\t{position}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse "<time>\t<position>" lines; '#' comments and blank lines skipped.
pub fn load_beats(path: &Path) -> Result<Vec<(f64, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let mut events = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let time: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Annotation(format!("line {}: bad time", lineno + 1)))?;
        let position: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Annotation(format!("line {}: bad position", lineno + 1)))?;
        events.push((time, position));
    }
    if events.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Annotation("beat times must be strictly ascending".into()));
    }
    Ok(events)
}

pub fn annotation_to_events(ann: &Annotation) -> Vec<(f64, usize)> {
    ann.beat_times
        .iter()
        .zip(&ann.beat_positions)
        .map(|(&t, &p)| (t, p))
        .collect()
}

/// Rebuild an annotation from events; the meter is the largest position seen.
pub fn events_to_annotation(events: &[(f64, usize)]) -> Result<Annotation> {
    if events.is_empty() {
        return Err(Error::Annotation("no beats in file".into()));
    }
    let meter = events.iter().map(|&(_, p)| p).max().unwrap().max(1);
    let ann = Annotation {
        beat_times: events.iter().map(|&(t, _)| t).collect(),
        beat_positions: events.iter().map(|&(_, p)| p).collect(),
        beats_per_bar: meter,
    };
    ann.validate()?;
    Ok(ann)
}

// ── key=value configs and manifests ─────────────────────────────────

/// Ordered key=value pairs with '#' comments, one per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    pub entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Format(format!("bad value for {key}: {raw:?}"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<KvFile> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(KvFile { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<KvFile> {
        KvFile::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::synth::{synth_clip, SynthParams};

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("beatkit_io_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn clip_roundtrip_via_f32() {
        let mut rng = Rng::new(1);
        let (clip, _) = synth_clip(
            &SynthParams {
                frames: 64,
                n_mel: 16,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let path = tmpdir().join("clip.bspc");
        save_clip(&clip, &path).unwrap();
        let back = load_clip(&path).unwrap();
        assert_eq!(back.frames(), clip.frames());
        assert_eq!(back.channel_names, clip.channel_names);
        assert_eq!(back.fps, clip.fps);
        for (a, b) in back.values.data().iter().zip(clip.values.data()) {
            assert!((a - b).abs() < 1e-6, "f32 storage tolerance");
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn clip_save_is_deterministic() {
        let mut rng = Rng::new(2);
        let (clip, _) = synth_clip(
            &SynthParams {
                frames: 32,
                n_mel: 16,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let dir = tmpdir();
        let (p1, p2) = (dir.join("a.bspc"), dir.join("b.bspc"));
        save_clip(&clip, &p1).unwrap();
        save_clip(&clip, &p2).unwrap();
        assert_eq!(file_checksum(&p1).unwrap(), file_checksum(&p2).unwrap());
        std::fs::remove_file(&p1).unwrap();
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn activation_roundtrip() {
        let acts = ActivationTrack {
            beat: (0..50).map(|i| (i as f64 / 50.0) * 0.9).collect(),
            downbeat: (0..50).map(|i| (i as f64 / 50.0) * 0.4).collect(),
            tempo: {
                let mut d = vec![0.0; TEMPO_CLASSES];
                d[119] = 0.5;
                d[118] = 0.25;
                d[120] = 0.25;
                d
            },
            fps: 43.07,
        };
        let path = tmpdir().join("acts.bact");
        save_activations(&acts, &path).unwrap();
        let back = load_activations(&path).unwrap();
        assert_eq!(back.beat.len(), 50);
        assert!((back.tempo.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (a, b) in back.beat.iter().zip(&acts.beat) {
            assert!((a - b).abs() < 1e-6);
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn beats_text_roundtrip_with_comments() {
        let path = tmpdir().join("beats.txt");
        std::fs::write(
            &path,
            "# header comment\n0.500000\t1\n1.000000\t2  # inline\n\n1.500000\t3\n",
        )
        .unwrap();
        let events = load_beats(&path).unwrap();
        assert_eq!(events, vec![(0.5, 1), (1.0, 2), (1.5, 3)]);
        save_beats(&events, &path).unwrap();
        assert_eq!(load_beats(&path).unwrap(), events);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn beats_text_rejects_descending_times() {
        let path = tmpdir().join("bad.txt");
        std::fs::write(&path, "1.0\t1\n0.5\t2\n").unwrap();
        assert!(matches!(load_beats(&path), Err(Error::Annotation(_))));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn kv_file_roundtrip() {
        let mut kv = KvFile::default();
        kv.set("profile", "desk");
        kv.set("train.epochs", 20);
        kv.set("dbn.min_bpm", 55.5);
        let text = kv.to_text();
        let back = KvFile::from_text(&text).unwrap();
        assert_eq!(back, kv);
        assert_eq!(back.parse::<usize>("train.epochs").unwrap(), Some(20));
        assert_eq!(back.parse::<f64>("dbn.min_bpm").unwrap(), Some(55.5));
        assert!(back.parse::<usize>("dbn.min_bpm").is_err());
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}

//! On-disk layout of runs.
//!
//! A clip directory holds `manifest.json`, `metrics.json`, `traces.csv`,
//! `frames/NNNN.pgm` and `frames/NNNN.zst` (decoded frames) and
//! `noise/NNNN.zst` (starting noise). A noise directory holds `noise.json`,
//! `traces.csv` and `noise/NNNN.zst`. Frame numbers start at 1. Every file is
//! written to a temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoisePrior, NoiseSequence, SearchTrace};
use crate::numerics::{normality, read_tensor_file, write_tensor, NormalityCheck, Tensor};
use crate::pipeline::{frame_correlation_report, CorrelationReport, RunManifest, VideoClip};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRACES_FILE: &str = "traces.csv";
pub const NOISE_SIDECAR_FILE: &str = "noise.json";

pub fn frame_path(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join("frames").join(format!("{:04}.{ext}", i + 1))
}

pub fn noise_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("noise").join(format!("{:04}.zst", i + 1))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("no file name in {}", path.display())))?;
    let tmp = parent.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn write_tensor_atomic(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * t.len());
    write_tensor(&mut bytes, t)?;
    atomic_write(path, &bytes)
}

/// Global `[min, max]` over every frame.
pub fn value_range(frames: &[Tensor]) -> [f32; 2] {
    frames
        .iter()
        .flat_map(|f| f.data().iter().copied())
        .fold([f32::INFINITY, f32::NEG_INFINITY], |[lo, hi], v| {
            [lo.min(v), hi.max(v)]
        })
}

/// Binary PGM of one frame. `[H, W]` maps directly; `[C, H, W]` stacks
/// channels vertically; rank 1 becomes a single row. Values map affinely
/// from `range` onto 0..=255.
pub fn pgm_bytes(frame: &Tensor, range: [f32; 2]) -> Vec<u8> {
    let shape = frame.shape();
    let width = *shape.last().expect("tensor shape is never empty");
    let height = frame.len() / width;
    let [lo, hi] = range;
    let span = f64::from(hi) - f64::from(lo);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(frame.data().iter().map(|&v| {
        if span > 0.0 {
            ((f64::from(v) - f64::from(lo)) / span * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

#[derive(Serialize)]
struct TraceRow<'a> {
    frame: usize,
    phase: &'a str,
    step: usize,
    loss: f64,
    accepted: bool,
}

/// One CSV row per search iteration; `frame` is 1-based.
pub fn traces_csv(traces: &[SearchTrace]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in traces {
        for (step, (&loss, &accepted)) in t.step_losses.iter().zip(&t.accepted).enumerate() {
            w.serialize(TraceRow {
                frame: t.frame + 1,
                phase: t.phase.as_str(),
                step,
                loss,
                accepted,
            })?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub frame_count: usize,
    pub achieved_kl: Vec<f64>,
    pub correlation: Option<CorrelationReport>,
    pub noise_normality: Vec<NormalityCheck>,
}

pub fn clip_metrics(clip: &VideoClip) -> Result<ClipMetrics> {
    let correlation = if clip.frames.len() >= 2 {
        Some(frame_correlation_report(&clip.frames)?)
    } else {
        None
    };
    Ok(ClipMetrics {
        frame_count: clip.frames.len(),
        achieved_kl: clip.manifest.achieved_kl.clone(),
        correlation,
        noise_normality: clip
            .terminal_noise
            .iter()
            .filter(|n| n.len() >= 8)
            .map(normality)
            .collect::<Result<_>>()?,
    })
}

/// Writes every artifact of `clip`, recording the PGM value range in its
/// manifest first.
pub fn write_clip(dir: &Path, clip: &mut VideoClip) -> Result<()> {
    let range = value_range(&clip.frames);
    clip.manifest.pgm_range = Some(range);
    for (i, frame) in clip.frames.iter().enumerate() {
        atomic_write(&frame_path(dir, i, "pgm"), &pgm_bytes(frame, range))?;
        write_tensor_atomic(&frame_path(dir, i, "zst"), frame)?;
    }
    for (i, eps) in clip.terminal_noise.iter().enumerate() {
        write_tensor_atomic(&noise_path(dir, i), eps)?;
    }
    write_analysis(dir, clip)?;
    write_json(&dir.join(MANIFEST_FILE), &clip.manifest)
}

/// `metrics.json` and `traces.csv` for a clip.
pub fn write_analysis(dir: &Path, clip: &VideoClip) -> Result<()> {
    atomic_write(&dir.join(TRACES_FILE), &traces_csv(&clip.manifest.traces)?)?;
    write_json(&dir.join(METRICS_FILE), &clip_metrics(clip)?)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Loads a clip written by [`write_clip`]. Starting noise is optional; a
/// clip without it can be analyzed but not extended.
pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let frames = (0..manifest.frame_count)
        .map(|i| read_tensor_file(frame_path(dir, i, "zst")))
        .collect::<Result<Vec<_>>>()?;
    let mut terminal_noise = Vec::new();
    for i in 0..manifest.frame_count {
        let p = noise_path(dir, i);
        if !p.exists() {
            terminal_noise.clear();
            break;
        }
        terminal_noise.push(read_tensor_file(p)?);
    }
    Ok(VideoClip {
        frames,
        terminal_noise,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSidecar {
    pub software: String,
    pub m: usize,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub prior: NoisePrior,
    pub achieved_kl: Vec<f64>,
    pub normality: Vec<NormalityCheck>,
    pub traces: Vec<SearchTrace>,
    #[serde(default)]
    pub flags: std::collections::BTreeMap<String, String>,
}

pub fn write_noise(dir: &Path, seq: &NoiseSequence, sidecar: &NoiseSidecar) -> Result<()> {
    for (i, f) in seq.frames.iter().enumerate() {
        write_tensor_atomic(&noise_path(dir, i), f.eps())?;
    }
    atomic_write(&dir.join(TRACES_FILE), &traces_csv(&seq.traces)?)?;
    write_json(&dir.join(NOISE_SIDECAR_FILE), sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::SearchPhase;

    #[test]
    fn pgm_layout() {
        let f = Tensor::new(vec![2, 3], vec![-1.0, 0.0, 1.0, 1.0, 0.5, -1.0]).unwrap();
        let bytes = pgm_bytes(&f, [-1.0, 1.0]);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 191, 0]);
        let flat = pgm_bytes(&Tensor::full(&[4], 3.0).unwrap(), [3.0, 3.0]);
        assert_eq!(flat, b"P5\n4 1\n255\n\0\0\0\0".to_vec());
    }

    #[test]
    fn range_spans_all_frames() {
        let a = Tensor::new(vec![2], vec![0.5, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![-3.0, 1.0]).unwrap();
        assert_eq!(value_range(&[a, b]), [-3.0, 2.0]);
    }

    #[test]
    fn traces_csv_rows() {
        let t = SearchTrace {
            frame: 1,
            phase: SearchPhase::Linear,
            step_losses: vec![0.5, 0.25],
            accepted: vec![true, false],
            alphas: vec![0.1, 0.2],
            final_alpha: Some(0.1),
            final_loss: 0.5,
        };
        let text = String::from_utf8(traces_csv(&[t]).unwrap()).unwrap();
        assert_eq!(
            text,
            "frame,phase,step,loss,accepted\n2,linear,0,0.5,true\n2,linear,1,0.25,false\n"
        );
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn clip_roundtrip() {
        use crate::diffusion::{DdimConfig, DenoiserSpec, MixtureModel};
        use crate::pipeline::{zs2_sample, Zs2Config};
        let mut cfg = Zs2Config::default().with_frames(3, 0.01, 0.98);
        cfg.frame_shape = vec![8, 8];
        cfg.ddim = DdimConfig::uniform(1000, 5).unwrap();
        cfg.denoiser = DenoiserSpec::mixture(MixtureModel::two_patterns(&[8, 8]).unwrap());
        let mut clip = zs2_sample(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_clip(dir.path(), &mut clip).unwrap();
        assert_eq!(load_clip(dir.path()).unwrap(), clip);
        fs::remove_file(noise_path(dir.path(), 2)).unwrap();
        assert!(load_clip(dir.path()).unwrap().terminal_noise.is_empty());
    }
}

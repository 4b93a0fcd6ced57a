//! Dataset export and loading: one directory per trajectory holding PNG
//! frames plus a JSONL metadata file, under a top-level manifest.

use crate::env::{EnvState, PusherEnv, Trajectory};
use crate::error::{ReplanError, Result};
use crate::geom::Vec2;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub layout_id: String,
    pub seed: u64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub resolution: usize,
    pub frame_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameMeta {
    frame: usize,
    robot_xy: [f64; 2],
    puck_xy: [f64; 2],
    layout_id: String,
    seed: u64,
}

/// One loaded frame: quantized RGB plus the state it was rendered from.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rgb: Vec<u8>,
    pub resolution: usize,
    pub state: EnvState,
    pub episode: usize,
    pub step: usize,
}

impl Frame {
    /// Image as `[3,H,W]` floats in `[0,1]`.
    pub fn to_array(&self) -> Array3<f64> {
        let r = self.resolution;
        let mut out = Array3::<f64>::zeros((3, r, r));
        for i in 0..r {
            for j in 0..r {
                for k in 0..3 {
                    out[[k, i, j]] = self.rgb[(i * r + j) * 3 + k] as f64 / 255.0;
                }
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<Frame>,
}

impl Dataset {
    /// Split off the last `holdout` frames for held-out metrics.
    pub fn split(&self, holdout: usize) -> (&[Frame], &[Frame]) {
        let n = self.frames.len();
        let h = holdout.min(n / 2);
        self.frames.split_at(n - h)
    }
}

fn image_to_rgb8(img: &Array3<f64>) -> (Vec<u8>, usize) {
    let r = img.shape()[1];
    let mut buf = vec![0u8; r * r * 3];
    for i in 0..r {
        for j in 0..r {
            for k in 0..3 {
                buf[(i * r + j) * 3 + k] = (img[[k, i, j]] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (buf, r)
}

pub fn save_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (buf, r) = image_to_rgb8(img);
    let im = image::RgbImage::from_raw(r as u32, r as u32, buf)
        .ok_or_else(|| ReplanError::Data("image buffer size mismatch".into()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    im.save(path)
        .map_err(|e| ReplanError::Data(format!("png write {}: {e}", path.display())))
}

/// Render and export trajectories; returns the number of frames written.
pub fn export_dataset(
    env: &PusherEnv,
    trajectories: &[Trajectory],
    seed: u64,
    dir: &Path,
) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut frame_count = 0;
    for (ep, traj) in trajectories.iter().enumerate() {
        let ep_dir = dir.join(format!("ep{ep:04}"));
        std::fs::create_dir_all(&ep_dir)?;
        let meta_path = ep_dir.join("meta.jsonl");
        let mut meta = std::io::BufWriter::new(std::fs::File::create(&meta_path)?);
        for (t, state) in traj.states.iter().enumerate() {
            let img = env.render(state, env.resolution)?;
            save_png(&img, &ep_dir.join(format!("frame_{t:04}.png")))?;
            let line = serde_json::to_string(&FrameMeta {
                frame: t,
                robot_xy: [state.robot_xy.x, state.robot_xy.y],
                puck_xy: [state.puck_xy.x, state.puck_xy.y],
                layout_id: traj.layout_id.clone(),
                seed: traj.seed,
            })
            .map_err(|e| ReplanError::Data(format!("meta encode: {e}")))?;
            writeln!(meta, "{line}")?;
            frame_count += 1;
        }
    }
    let manifest = Manifest {
        version: DATASET_FORMAT_VERSION,
        layout_id: env.layout.name.clone(),
        seed,
        episodes: trajectories.len(),
        steps_per_episode: trajectories.first().map(|t| t.len()).unwrap_or(0),
        resolution: env.resolution,
        frame_count,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| ReplanError::Data(format!("manifest encode: {e}")))?,
    )?;
    Ok(frame_count)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| ReplanError::Data(format!("missing manifest {}: {e}", manifest_path.display())))?,
    )
    .map_err(|e| ReplanError::Data(format!("manifest decode: {e}")))?;
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(ReplanError::Data(format!(
            "dataset version {} unsupported (expected {DATASET_FORMAT_VERSION})",
            manifest.version
        )));
    }

    let mut frames = Vec::with_capacity(manifest.frame_count);
    for ep in 0..manifest.episodes {
        let ep_dir = dir.join(format!("ep{ep:04}"));
        let meta_file = std::fs::File::open(ep_dir.join("meta.jsonl"))?;
        for (step, line) in std::io::BufReader::new(meta_file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let meta: FrameMeta = serde_json::from_str(&line)
                .map_err(|e| ReplanError::Data(format!("meta decode ep {ep}: {e}")))?;
            let png_path: PathBuf = ep_dir.join(format!("frame_{:04}.png", meta.frame));
            let img = image::open(&png_path)
                .map_err(|e| ReplanError::Data(format!("png read {}: {e}", png_path.display())))?
                .into_rgb8();
            if img.width() as usize != manifest.resolution {
                return Err(ReplanError::Data(format!(
                    "frame {} resolution {} != manifest {}",
                    png_path.display(),
                    img.width(),
                    manifest.resolution
                )));
            }
            frames.push(Frame {
                rgb: img.into_raw(),
                resolution: manifest.resolution,
                state: EnvState {
                    robot_xy: Vec2::new(meta.robot_xy[0], meta.robot_xy[1]),
                    puck_xy: Vec2::new(meta.puck_xy[0], meta.puck_xy[1]),
                    layout_id: meta.layout_id,
                    step_count: step as u32,
                },
                episode: ep,
                step,
            });
        }
    }
    if frames.len() != manifest.frame_count {
        return Err(ReplanError::Data(format!(
            "frame count {} != manifest {}",
            frames.len(),
            manifest.frame_count
        )));
    }
    Ok(Dataset { manifest, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{scripted_explore, LayoutRegistry, PusherEnv};

    #[test]
    fn export_then_load_round_trips() {
        let reg = LayoutRegistry::builtin();
        let env = PusherEnv::new(reg.get("open").unwrap(), 32, 6, 0.03, false).unwrap();
        let trajs = scripted_explore(&env, 2, 5);
        let dir = tempfile::tempdir().unwrap();
        let n = export_dataset(&env, &trajs, 5, dir.path()).unwrap();
        assert_eq!(n, 2 * 7);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.frames.len(), n);
        assert_eq!(ds.manifest.resolution, 32);
        // state round-trip
        assert_eq!(ds.frames[3].state.puck_xy, trajs[0].states[3].puck_xy);
        // pixels round-trip through quantization deterministically
        let img = env.render(&trajs[0].states[0], 32).unwrap();
        let (expect, _) = super::image_to_rgb8(&img);
        assert_eq!(ds.frames[0].rgb, expect);
    }
}

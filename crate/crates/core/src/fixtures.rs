//! Synthetic dataset generator.
//!
//! Produces face-like rasters where each active AU paints a pair of
//! mirrored colored blobs at a class-specific location (AUs are bilateral,
//! which also keeps images invariant under the horizontal-flip
//! augmentation). Labels follow per-video persistence chains with planted
//! co-occurrence: AU12 mostly copies AU6, and AU26 implies AU25. The
//! image fully determines the underlying activations, so the task is
//! separable and a trained detector can be checked against known
//! structure.

use crate::dataset::{write_manifest, write_raster, FrameRecord};
use crate::error::{Error, Result};
use crate::objective::LabelVector;
use crate::tensor::{seeded_rng, Tensor};
use crate::{NUM_AU, RARE_AU_INDICES};
use rand::Rng;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub videos: usize,
    pub frames_per_video: u64,
    pub image_hw: usize,
    pub seed: u64,
    /// Per-(frame, class) probability of masking the annotation with -1.
    pub mask_rate: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            videos: 8,
            frames_per_video: 200,
            image_hw: 64,
            seed: 7,
            mask_rate: 0.01,
        }
    }
}

/// Blob anchor (left x, y) per AU on a 64x64 canvas; mirrored about the
/// vertical midline when drawn. Three columns by four rows keeps every
/// pair of distinct-AU blobs at least 10px apart.
const ANCHORS: [(usize, usize); NUM_AU] = [
    (8, 10),
    (18, 10),
    (28, 10),
    (8, 22),
    (18, 22),
    (28, 22),
    (8, 34),
    (18, 34),
    (28, 34),
    (8, 46),
    (18, 46),
    (28, 46),
];

/// Distinct RGB signature per AU: twelve points on a sphere of radius
/// 0.42 around mid-gray (icosahedron vertices), so every color is an
/// extreme point a single relu unit can isolate, with pairwise distance
/// at least 0.44.
const COLORS: [(f32, f32, f32); NUM_AU] = [
    (0.5, 0.7208, 0.8573),
    (0.5, 0.7208, 0.1427),
    (0.5, 0.2792, 0.8573),
    (0.5, 0.2792, 0.1427),
    (0.7208, 0.8573, 0.5),
    (0.7208, 0.1427, 0.5),
    (0.2792, 0.8573, 0.5),
    (0.2792, 0.1427, 0.5),
    (0.8573, 0.5, 0.7208),
    (0.8573, 0.5, 0.2792),
    (0.1427, 0.5, 0.7208),
    (0.1427, 0.5, 0.2792),
];

/// Stationary activation rate per AU: the five rare classes sit well below
/// the rest so the resampler has real imbalance to correct.
fn base_rate(au: usize) -> f64 {
    if RARE_AU_INDICES.contains(&au) {
        0.12
    } else {
        0.35
    }
}

const PERSISTENCE: f64 = 0.9;

/// Render one frame from its underlying activation pattern.
pub fn render_frame(
    active: &[bool; NUM_AU],
    image_hw: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor<f32> {
    let hw = image_hw;
    let scale = hw as f32 / 64.0;
    let mut data = vec![0.0f32; 3 * hw * hw];

    // dim background with a face oval and mild noise
    let (cx, cy) = (hw as f32 / 2.0, hw as f32 * 0.55);
    let (rx, ry) = (hw as f32 * 0.34, hw as f32 * 0.44);
    for y in 0..hw {
        for x in 0..hw {
            let dx = (x as f32 - cx) / rx;
            let dy = (y as f32 - cy) / ry;
            let base = if dx * dx + dy * dy <= 1.0 { 0.22 } else { 0.08 };
            for c in 0..3 {
                let noise = rng.random::<f64>() as f32 * 0.04;
                data[(c * hw + y) * hw + x] = base + noise;
            }
        }
    }

    // blobs blend toward their color instead of adding, so the observed
    // center color matches the palette and never clips
    let radius = (5.5 * scale).max(2.0);
    for au in 0..NUM_AU {
        if !active[au] {
            continue;
        }
        let (ax, ay) = ANCHORS[au];
        let ax = (ax as f32 * scale).round() as i32;
        let ay = (ay as f32 * scale).round() as i32;
        let color = [COLORS[au].0, COLORS[au].1, COLORS[au].2];
        for &bx in &[ax, hw as i32 - 1 - ax] {
            let r_ceil = radius.ceil() as i32;
            for dy in -r_ceil..=r_ceil {
                for dx in -r_ceil..=r_ceil {
                    let (px, py) = (bx + dx, ay + dy);
                    if px < 0 || py < 0 || px >= hw as i32 || py >= hw as i32 {
                        continue;
                    }
                    let dist = ((dx * dx + dy * dy) as f32).sqrt();
                    if dist > radius {
                        continue;
                    }
                    let alpha = 0.92 * ((radius - dist) / 1.5).clamp(0.0, 1.0);
                    let idx = (py as usize) * hw + px as usize;
                    for (c, &col) in color.iter().enumerate() {
                        let p = &mut data[c * hw * hw + idx];
                        *p += alpha * (col - *p);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![3, hw, hw], data)
}

/// Generate the dataset under `out_dir`: `rasters/*.aut1` plus
/// `manifest.tsv`. Returns the records in manifest order.
pub fn generate(spec: &FixtureSpec, out_dir: &Path) -> Result<Vec<FrameRecord>> {
    if spec.videos == 0 || spec.frames_per_video == 0 {
        return Err(Error::Config("fixtures need videos and frames > 0".into()));
    }
    if spec.image_hw < 16 {
        return Err(Error::Config("fixture images must be at least 16x16".into()));
    }
    let raster_dir = out_dir.join("rasters");
    std::fs::create_dir_all(&raster_dir)
        .map_err(|e| Error::io(raster_dir.display().to_string(), e))?;

    let mut rng = seeded_rng(spec.seed, 10);
    let mut records = Vec::with_capacity(spec.videos * spec.frames_per_video as usize);

    for video in 0..spec.videos {
        let video_id = format!("v{video:02}");
        // per-AU persistence chains
        let mut state = [false; NUM_AU];
        for (au, s) in state.iter_mut().enumerate() {
            *s = rng.random::<f64>() < base_rate(au);
        }
        for frame in 0..spec.frames_per_video {
            if frame > 0 {
                for (au, s) in state.iter_mut().enumerate() {
                    if rng.random::<f64>() >= PERSISTENCE {
                        *s = rng.random::<f64>() < base_rate(au);
                    }
                }
            }
            // planted co-occurrence: AU12 tracks AU6, AU26 implies AU25
            let mut active = state;
            if rng.random::<f64>() < 0.7 {
                active[6] = active[3];
            }
            if active[11] && rng.random::<f64>() < 0.9 {
                active[10] = true;
            }

            let image = render_frame(&active, spec.image_hw, &mut rng);
            let rel_path = format!("rasters/{video_id}_f{frame:05}.aut1");
            write_raster(&out_dir.join(&rel_path), &image)?;

            let mut labels = [0i8; NUM_AU];
            for au in 0..NUM_AU {
                labels[au] = if rng.random::<f64>() < spec.mask_rate {
                    -1
                } else {
                    active[au] as i8
                };
            }
            records.push(FrameRecord {
                path: rel_path,
                video_id: video_id.clone(),
                frame_index: frame,
                labels: LabelVector::new(labels)?,
            });
        }
    }

    let manifest_path = out_dir.join("manifest.tsv");
    let mut buf = Vec::new();
    write_manifest(&mut buf, &records)?;
    std::fs::write(&manifest_path, buf)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(records)
}

/// Per-AU positive/negative/masked counts over a record set.
pub fn label_distribution(records: &[FrameRecord]) -> [(usize, usize, usize); NUM_AU] {
    let mut out = [(0usize, 0usize, 0usize); NUM_AU];
    for r in records {
        for au in 0..NUM_AU {
            match r.labels.get(au) {
                1 => out[au].0 += 1,
                0 => out[au].1 += 1,
                _ => out[au].2 += 1,
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_manifest_file;

    #[test]
    fn generation_is_deterministic_and_parses_back() {
        let spec = FixtureSpec {
            videos: 2,
            frames_per_video: 12,
            image_hw: 32,
            seed: 5,
            mask_rate: 0.02,
        };
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let r1 = generate(&spec, dir1.path()).unwrap();
        let r2 = generate(&spec, dir2.path()).unwrap();
        assert_eq!(r1, r2);
        let parsed = parse_manifest_file(&dir1.path().join("manifest.tsv")).unwrap();
        assert_eq!(parsed, r1);
        // raster bytes identical across runs
        let b1 = std::fs::read(dir1.path().join(&r1[0].path)).unwrap();
        let b2 = std::fs::read(dir2.path().join(&r2[0].path)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn blobs_appear_exactly_for_active_aus() {
        let mut rng = seeded_rng(1, 0);
        let mut active = [false; NUM_AU];
        active[0] = true;
        let img = render_frame(&active, 64, &mut rng);
        let at = |c: usize, x: usize, y: usize| img.data()[(c * 64 + y) * 64 + x];
        // AU1 anchor (8,10): blob center close to its palette color
        assert!((at(0, 8, 10) - COLORS[0].0).abs() < 0.12);
        assert!((at(1, 8, 10) - COLORS[0].1).abs() < 0.12);
        assert!((at(2, 8, 10) - COLORS[0].2).abs() < 0.12);
        // mirrored twin
        assert!((at(1, 55, 10) - COLORS[0].1).abs() < 0.12);
        // an inactive AU's anchor stays background-gray
        assert!(at(0, 18, 22) < 0.35);
        assert!(at(1, 18, 22) < 0.35);
    }

    #[test]
    fn rare_aus_are_rarer_than_common_ones() {
        let spec = FixtureSpec {
            videos: 4,
            frames_per_video: 150,
            image_hw: 16,
            seed: 9,
            mask_rate: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let records = generate(&spec, dir.path()).unwrap();
        let dist = label_distribution(&records);
        let common_avg: f64 = (0..NUM_AU)
            .filter(|au| !RARE_AU_INDICES.contains(au))
            .map(|au| dist[au].0 as f64)
            .sum::<f64>()
            / 7.0;
        // AU2 and AU15 never get forced on by co-occurrence rules
        for au in [1usize, 7] {
            assert!(
                (dist[au].0 as f64) < common_avg,
                "rare AU{au} should be under-represented"
            );
        }
    }

    #[test]
    fn cooccurrence_structure_is_planted() {
        let spec = FixtureSpec {
            videos: 4,
            frames_per_video: 200,
            image_hw: 16,
            seed: 3,
            mask_rate: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let records = generate(&spec, dir.path()).unwrap();
        // P(AU12 | AU6) should clearly exceed P(AU12 | not AU6)
        let (mut with6, mut n6, mut without6, mut not6) = (0f64, 0f64, 0f64, 0f64);
        // P(AU25 | AU26) should be near 1
        let (mut with26, mut n26) = (0f64, 0f64);
        for r in &records {
            if r.labels.is_positive(3) {
                n6 += 1.0;
                with6 += r.labels.is_positive(6) as i32 as f64;
            } else if r.labels.is_negative(3) {
                not6 += 1.0;
                without6 += r.labels.is_positive(6) as i32 as f64;
            }
            if r.labels.is_positive(11) {
                n26 += 1.0;
                with26 += r.labels.is_positive(10) as i32 as f64;
            }
        }
        assert!(with6 / n6 > without6 / not6 + 0.3);
        assert!(with26 / n26 > 0.85);
    }
}

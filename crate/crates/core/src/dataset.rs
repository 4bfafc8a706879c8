//! Annotation manifests, raw-float rasters, the stride resampler, and the
//! two training-time augmentations.
//!
//! File formats:
//! - Manifest: UTF-8 text, one record per line,
//!   `path<TAB>video_id<TAB>frame_index<TAB>l1,l2,...,l12` with labels in
//!   {-1,0,1} in the fixed AU order. Lines starting with `#` are ignored.
//! - AUT1 raster: magic `AUT1`, three little-endian u32 (channels, height,
//!   width), then channels*height*width little-endian f32 values in
//!   channel-major planes, row-major within a plane, values in [0,1].

use crate::error::{Error, Result};
use crate::objective::LabelVector;
use crate::tensor::{Real, Tensor};
use crate::{NUM_AU, RARE_AU_INDICES};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::io::{BufRead, Read, Write};
use std::path::Path;

const RASTER_MAGIC: &[u8; 4] = b"AUT1";

/// One annotated video frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub path: String,
    pub video_id: String,
    pub frame_index: u64,
    pub labels: LabelVector,
}

/// Parse a manifest from a line stream. Validates label domain and
/// (video_id, frame_index) uniqueness; preserves input order.
pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<FrameRecord>> {
    let mut records = Vec::new();
    let mut seen: HashSet<(String, u64)> = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Manifest {
            line: lineno,
            msg: format!("read failure: {e}"),
        })?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let frame_index: u64 = fields[2].parse().map_err(|_| Error::Manifest {
            line: lineno,
            msg: format!("invalid frame index `{}`", fields[2]),
        })?;
        let label_parts: Vec<&str> = fields[3].split(',').collect();
        if label_parts.len() != NUM_AU {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!("expected {} labels, got {}", NUM_AU, label_parts.len()),
            });
        }
        let mut values = [0i8; NUM_AU];
        for (i, p) in label_parts.iter().enumerate() {
            values[i] = p.parse().map_err(|_| Error::Manifest {
                line: lineno,
                msg: format!("invalid label `{p}`"),
            })?;
        }
        let labels = LabelVector::new(values).map_err(|e| Error::Manifest {
            line: lineno,
            msg: e.to_string(),
        })?;
        let key = (fields[1].to_string(), frame_index);
        if !seen.insert(key) {
            return Err(Error::Manifest {
                line: lineno,
                msg: format!(
                    "duplicate (video_id, frame_index) = ({}, {})",
                    fields[1], frame_index
                ),
            });
        }
        records.push(FrameRecord {
            path: fields[0].to_string(),
            video_id: fields[1].to_string(),
            frame_index,
            labels,
        });
    }
    Ok(records)
}

pub fn parse_manifest_file(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_manifest(std::io::BufReader::new(file))
}

/// Serialize records back into manifest lines.
pub fn write_manifest<W: Write>(w: &mut W, records: &[FrameRecord]) -> Result<()> {
    for r in records {
        let labels: Vec<String> = r.labels.values().iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.path,
            r.video_id,
            r.frame_index,
            labels.join(",")
        )
        .map_err(|e| Error::io("manifest", e))?;
    }
    Ok(())
}

/// Deterministic frame selection: within each video (frames in index
/// order), frames with any rare AU active are taken every 5th, the rest
/// every 10th, each stream counted separately from its first eligible
/// frame. The output preserves manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePlan {
    /// Indices into the input record slice.
    pub selected: Vec<usize>,
    /// Selected from the dense (rare-AU) stream.
    pub rare_count: usize,
    /// Selected from the base stream.
    pub base_count: usize,
    pub videos: usize,
}

/// Stride for frames carrying an active under-represented AU.
pub const RARE_STRIDE: usize = 5;
/// Stride for all other frames.
pub const BASE_STRIDE: usize = 10;

fn has_active_rare_au(labels: &LabelVector) -> bool {
    RARE_AU_INDICES.iter().any(|&i| labels.is_positive(i))
}

pub fn resample(records: &[FrameRecord]) -> SamplePlan {
    // Group positions by video, keeping first-seen video order.
    let mut video_order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let entry = groups.entry(r.video_id.as_str()).or_default();
        if entry.is_empty() {
            video_order.push(r.video_id.as_str());
        }
        entry.push(i);
    }

    let mut selected = Vec::new();
    let mut rare_count = 0;
    let mut base_count = 0;
    for vid in &video_order {
        let mut positions = groups[vid].clone();
        positions.sort_by_key(|&i| records[i].frame_index);
        let mut rare_seen = 0usize;
        let mut base_seen = 0usize;
        for &i in &positions {
            if has_active_rare_au(&records[i].labels) {
                if rare_seen % RARE_STRIDE == 0 {
                    selected.push(i);
                    rare_count += 1;
                }
                rare_seen += 1;
            } else {
                if base_seen % BASE_STRIDE == 0 {
                    selected.push(i);
                    base_count += 1;
                }
                base_seen += 1;
            }
        }
    }
    selected.sort_unstable();
    selected.dedup();
    SamplePlan {
        selected,
        rare_count,
        base_count,
        videos: video_order.len(),
    }
}

/// Names of the augmentations in effect. Label-mixing schemes are absent
/// on purpose: they conflict with the circle loss.
pub const AUGMENTATIONS: [&str; 2] = ["hflip", "color-jitter"];

/// Mirror the image horizontally. All 12 AUs are bilaterally symmetric
/// actions, so labels are unaffected.
pub fn hflip<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

/// Training augmentation: horizontal flip with probability 0.5, then a
/// per-channel affine jitter (scale in [0.8, 1.2], shift in [-0.1, 0.1])
/// clamped back to [0,1]. Draw order is fixed: flip decision first, then
/// per-channel (scale, shift) pairs.
pub fn augment<T: Real>(image: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let flip: bool = rng.random::<f64>() < 0.5;
    let mut img = if flip { hflip(image) } else { image.clone() };
    let s = img.shape().to_vec();
    let (c, hw) = (s[0], s[1] * s[2]);
    for ch in 0..c {
        let scale = T::of_f64(0.8 + 0.4 * rng.random::<f64>());
        let shift = T::of_f64(-0.1 + 0.2 * rng.random::<f64>());
        let data = img.data_mut();
        for p in 0..hw {
            let v = data[ch * hw + p] * scale + shift;
            data[ch * hw + p] = v.max(T::zero()).min(T::one());
        }
    }
    img
}

/// Write a raster in the AUT1 container format.
pub fn write_raster(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_raster",
            lhs: image.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut bytes = Vec::with_capacity(16 + image.numel() * 4);
    bytes.extend_from_slice(RASTER_MAGIC);
    for &dim in image.shape() {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a raster back; the payload is bit-exact with what was stored.
pub fn load_raster(path: &Path) -> Result<Tensor<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_raster(&bytes)
}

pub fn decode_raster(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[0..4] != RASTER_MAGIC {
        return Err(Error::Raster {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected {:?}",
                &bytes.get(0..4).unwrap_or(&[]),
                RASTER_MAGIC
            ),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Raster {
            offset: bytes.len(),
            msg: "truncated header".into(),
        });
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + i * 4;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if *d == 0 {
            return Err(Error::Raster {
                offset: off,
                msg: "zero extent in header".into(),
            });
        }
    }
    let numel = dims[0] * dims[1] * dims[2];
    let expected = 16 + numel * 4;
    if bytes.len() != expected {
        return Err(Error::Raster {
            offset: bytes.len().min(expected),
            msg: format!(
                "payload size mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = 16 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Raster {
                offset: off,
                msg: "non-finite payload value".into(),
            });
        }
        data.push(v);
    }
    Ok(Tensor::from_parts(dims.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_tensor, seeded_rng};
    use std::io::Cursor;

    fn manifest_line(video: &str, frame: u64, labels: &str) -> String {
        format!("v/{video}/{frame}.aut1\t{video}\t{frame}\t{labels}")
    }

    #[test]
    fn parses_well_formed_manifest() {
        let text = format!(
            "# comment\n{}\n{}\n{}\n",
            manifest_line("a", 0, "1,0,0,0,0,0,0,0,0,0,0,0"),
            manifest_line("a", 1, "-1,0,0,0,0,0,0,0,0,0,0,1"),
            manifest_line("b", 0, "0,0,0,0,0,0,0,0,0,0,0,0"),
        );
        let records = parse_manifest(Cursor::new(text)).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[1].labels.get(0), -1);
        assert_eq!(records[2].video_id, "b");
    }

    #[test]
    fn rejects_bad_label_value_with_line_number() {
        let text = format!("{}\n", manifest_line("a", 0, "2,0,0,0,0,0,0,0,0,0,0,0"));
        match parse_manifest(Cursor::new(text)).unwrap_err() {
            Error::Manifest { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn rejects_wrong_label_count() {
        let text = format!("{}\n", manifest_line("a", 0, "0,0,0"));
        assert!(matches!(
            parse_manifest(Cursor::new(text)),
            Err(Error::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn rejects_duplicate_video_frame() {
        let text = format!(
            "{}\n{}\n",
            manifest_line("a", 5, "0,0,0,0,0,0,0,0,0,0,0,0"),
            manifest_line("a", 5, "1,0,0,0,0,0,0,0,0,0,0,0"),
        );
        assert!(matches!(
            parse_manifest(Cursor::new(text)),
            Err(Error::Manifest { line: 2, .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let mut rng = seeded_rng(3, 7);
        let mut records = Vec::new();
        for v in 0..10 {
            for f in 0..100 {
                let mut lv = [0i8; 12];
                for l in lv.iter_mut() {
                    *l = match rng.random_range(0..4) {
                        0 => 1,
                        1 => -1,
                        _ => 0,
                    };
                }
                records.push(FrameRecord {
                    path: format!("vid{v}/f{f}.aut1"),
                    video_id: format!("vid{v}"),
                    frame_index: f,
                    labels: LabelVector::new(lv).unwrap(),
                });
            }
        }
        let mut buf = Vec::new();
        write_manifest(&mut buf, &records).unwrap();
        let parsed = parse_manifest(Cursor::new(buf)).unwrap();
        assert_eq!(parsed, records);
    }

    fn records_with_labels(n: u64, labels: [i8; 12]) -> Vec<FrameRecord> {
        (0..n)
            .map(|f| FrameRecord {
                path: format!("f{f}"),
                video_id: "v0".into(),
                frame_index: f,
                labels: LabelVector::new(labels).unwrap(),
            })
            .collect()
    }

    #[test]
    fn resample_tenth_when_no_rare_aus() {
        let records = records_with_labels(100, [1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let plan = resample(&records);
        assert_eq!(plan.selected.len(), 10);
        let expect: Vec<usize> = (0..100).step_by(10).collect();
        assert_eq!(plan.selected, expect);
        assert_eq!(plan.base_count, 10);
        assert_eq!(plan.rare_count, 0);
    }

    #[test]
    fn resample_fifth_when_rare_au_active() {
        // AU15 is index 7
        let mut labels = [0i8; 12];
        labels[7] = 1;
        let records = records_with_labels(100, labels);
        let plan = resample(&records);
        assert_eq!(plan.selected.len(), 20);
        assert_eq!(plan.rare_count, 20);
    }

    #[test]
    fn resample_empty_manifest() {
        let plan = resample(&[]);
        assert!(plan.selected.is_empty());
        assert_eq!(plan.videos, 0);
    }

    #[test]
    fn resample_is_deterministic_and_per_video() {
        let mut records = records_with_labels(95, [0; 12]);
        let mut labels = [0i8; 12];
        labels[1] = 1; // AU2
        for f in 0..40u64 {
            records.push(FrameRecord {
                path: format!("g{f}"),
                video_id: "v1".into(),
                frame_index: f,
                labels: LabelVector::new(labels).unwrap(),
            });
        }
        let p1 = resample(&records);
        let p2 = resample(&records);
        assert_eq!(p1, p2);
        // ceil(95/10) from the base video, 40/5 from the rare video
        assert_eq!(p1.base_count, 10);
        assert_eq!(p1.rare_count, 8);
    }

    #[test]
    fn hflip_is_involution() {
        let mut rng = seeded_rng(4, 0);
        let img = rand_tensor::<f32>(&mut rng, vec![3, 5, 7], 0.5);
        assert_eq!(hflip(&hflip(&img)).data(), img.data());
    }

    #[test]
    fn jitter_clamps_to_unit_interval() {
        // scale 1.2 applied to 0.9 exceeds 1 and must clamp
        let v = (0.9f32 * 1.2).min(1.0);
        assert_eq!(v, 1.0);
        let mut rng = seeded_rng(5, 0);
        let img = Tensor::new(vec![1, 1, 2], vec![0.9f32, 0.2]).unwrap();
        for _ in 0..20 {
            let out = augment(&img, &mut rng);
            assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let img = {
            let mut rng = seeded_rng(6, 0);
            rand_tensor::<f32>(&mut rng, vec![3, 4, 4], 0.5)
        };
        let a = augment(&img, &mut seeded_rng(9, 1));
        let b = augment(&img, &mut seeded_rng(9, 1));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn raster_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.aut1");
        let mut rng = seeded_rng(8, 0);
        let img = rand_tensor::<f32>(&mut rng, vec![3, 8, 8], 0.5);
        write_raster(&path, &img).unwrap();
        let back = load_raster(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn raster_rejects_zero_extent() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"AUT1");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&8u32.to_le_bytes());
        assert!(matches!(
            decode_raster(&bytes),
            Err(Error::Raster { offset: 8, .. })
        ));
    }

    #[test]
    fn raster_rejects_bad_magic() {
        let bytes = b"XXXX____________".to_vec();
        assert!(matches!(
            decode_raster(&bytes),
            Err(Error::Raster { offset: 0, .. })
        ));
    }

    #[test]
    fn raster_rejects_truncated_payload() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.aut1");
        write_raster(&path, &img).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_raster(&bytes), Err(Error::Raster { .. })));
    }

    #[test]
    fn augmentation_registry_is_exactly_flip_and_jitter() {
        assert_eq!(AUGMENTATIONS, ["hflip", "color-jitter"]);
    }
}

//! On-disk dataset layout: `index.json` plus one little-endian float32 file per
//! (domain, split). See the README for the record layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Anchor, AnchorKind, Dataset, Domain, DomainSample, Keypoint, KeypointLabel, SampleMeta,
    SegLabel, Split, ToyWorldSpec,
};
use crate::error::{Result, TadaError};

pub const FORMAT_VERSION: u32 = 1;
const INDEX: &str = "index.json";

#[derive(Debug, Serialize, Deserialize)]
struct PartEntry {
    domain: Domain,
    split: Split,
    file: String,
    count: usize,
    record_floats: usize,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    spec: ToyWorldSpec,
    spec_hash: String,
    parts: Vec<PartEntry>,
    /// Per-sample metadata in part order.
    samples: Vec<SampleMeta>,
}

fn record_floats(spec: &ToyWorldSpec) -> usize {
    let hw = spec.image_size * spec.image_size;
    let anchor = match spec.anchor_kind {
        AnchorKind::Segmentation => hw,
        AnchorKind::Keypoints => 3 * spec.n_keypoints,
    };
    3 * hw + 3 * hw + hw + anchor
}

fn encode(sample: &DomainSample, out: &mut Vec<u8>) {
    let mut put = |v: f32| out.extend_from_slice(&v.to_le_bytes());
    sample.image.iter().for_each(|&v| put(v));
    sample.normals.iter().for_each(|&v| put(v));
    sample.valid_mask.iter().for_each(|&m| put(if m { 1.0 } else { 0.0 }));
    match &sample.anchor {
        Anchor::Segmentation(seg) => seg.classes.iter().for_each(|&c| put(c as f32)),
        Anchor::Keypoints(kp) => kp.points.iter().for_each(|p| {
            put(p.u);
            put(p.v);
            put(p.depth);
        }),
    }
}

fn decode(
    floats: &[f32],
    spec: &ToyWorldSpec,
    domain: Domain,
    split: Split,
    meta: SampleMeta,
) -> DomainSample {
    let size = spec.image_size;
    let hw = size * size;
    let (image, rest) = floats.split_at(3 * hw);
    let (normals, rest) = rest.split_at(3 * hw);
    let (mask, anchor) = rest.split_at(hw);
    let anchor = match spec.anchor_kind {
        AnchorKind::Segmentation => Anchor::Segmentation(SegLabel {
            classes: anchor.iter().map(|&c| c as u32).collect(),
            size,
        }),
        AnchorKind::Keypoints => Anchor::Keypoints(KeypointLabel {
            points: anchor
                .chunks_exact(3)
                .map(|p| Keypoint {
                    u: p[0],
                    v: p[1],
                    depth: p[2],
                })
                .collect(),
            image_size: size,
        }),
    };
    DomainSample {
        image: image.to_vec(),
        normals: normals.to_vec(),
        valid_mask: mask.iter().map(|&m| m != 0.0).collect(),
        anchor,
        domain,
        split,
        meta,
    }
}

pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let spec = &data.spec;
    let mut parts = Vec::new();
    let mut samples = Vec::new();
    for domain in Domain::ALL {
        for split in Split::ALL {
            let part = data.split(domain, split);
            let file = format!("{}_{}.bin", domain.name(), split.name());
            let mut bytes = Vec::with_capacity(part.len() * record_floats(spec) * 4);
            for s in part {
                encode(s, &mut bytes);
                samples.push(s.meta.clone());
            }
            fs::write(dir.join(&file), &bytes)?;
            parts.push(PartEntry {
                domain,
                split,
                file,
                count: part.len(),
                record_floats: record_floats(spec),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
    }
    let index = Index {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        parts,
        samples,
    };
    fs::write(dir.join(INDEX), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX);
    let raw = fs::read(&index_path)
        .map_err(|e| TadaError::format(&index_path, format!("cannot read index: {e}")))?;
    let index: Index = serde_json::from_slice(&raw)
        .map_err(|e| TadaError::format(&index_path, format!("corrupted index: {e}")))?;
    if index.format_version != FORMAT_VERSION {
        return Err(TadaError::format(
            &index_path,
            format!(
                "format version {} not supported (expected {FORMAT_VERSION})",
                index.format_version
            ),
        ));
    }
    let spec = index.spec;
    spec.validate()?;
    if spec.hash() != index.spec_hash {
        return Err(TadaError::format(&index_path, "spec hash does not match spec"));
    }
    let expected: usize = index.parts.iter().map(|p| p.count).sum();
    if expected != index.samples.len() {
        return Err(TadaError::format(
            &index_path,
            format!("{} sample records for {expected} samples", index.samples.len()),
        ));
    }
    let rf = record_floats(&spec);
    let mut metas = index.samples.into_iter();
    let mut samples = Vec::with_capacity(expected);
    for part in &index.parts {
        let path = dir.join(&part.file);
        if part.record_floats != rf {
            return Err(TadaError::format(&path, "record size disagrees with spec"));
        }
        let bytes = fs::read(&path)?;
        if bytes.len() as u64 != part.bytes || bytes.len() != part.count * rf * 4 {
            return Err(TadaError::format(
                &path,
                format!(
                    "expected {} bytes for {} records, found {}",
                    part.count * rf * 4,
                    part.count,
                    bytes.len()
                ),
            ));
        }
        if hex::encode(Sha256::digest(&bytes)) != part.sha256 {
            return Err(TadaError::format(&path, "checksum mismatch"));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        for rec in floats.chunks_exact(rf) {
            let meta = metas.next().expect("count checked above");
            samples.push(decode(rec, &spec, part.domain, part.split, meta));
        }
    }
    Ok(Dataset::from_parts(spec, samples))
}

//! Versioned, checksummed binary model files.
//!
//! Layout: 4-byte magic `SPCM`, little-endian `u32` format version,
//! little-endian `u64` payload length, the bincode payload, then the SHA-256
//! digest of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{FullModel, FullTrainConfig};

pub const ARCHIVE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SPCM";
const HEADER: usize = 4 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub model: FullModel,
    pub seed: u64,
    /// Training configuration snapshot, when the model came from `train`.
    pub config: Option<FullTrainConfig>,
}

pub fn encode_model(archive: &ModelArchive) -> Result<Vec<u8>> {
    let payload = bincode::serialize(archive).map_err(|e| Error::Encoding(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelArchive> {
    if bytes.len() < HEADER + DIGEST || &bytes[..4] != MAGIC {
        return Err(Error::Encoding("not a model archive".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != ARCHIVE_VERSION {
        return Err(Error::Version { found: version, expected: ARCHIVE_VERSION });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len != (bytes.len() - HEADER - DIGEST) as u64 {
        return Err(Error::Checksum);
    }
    let (payload, digest) = bytes[HEADER..].split_at(bytes.len() - HEADER - DIGEST);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let archive: ModelArchive = bincode::deserialize(payload).map_err(|e| Error::Encoding(e.to_string()))?;
    archive.model.validate()?;
    Ok(archive)
}

pub fn save_model(archive: &ModelArchive, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(archive)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelArchive> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{train_cascade, FrameGeometry, Sample, TrainConfig};
    use crate::imaging::{GrayImage, PatchSpec};
    use crate::nn::EncoderPreset;
    use crate::pipeline::{PreprocessConfig, ROI_HEIGHT, ROI_WIDTH};
    use crate::shape::{Point, Shape, ShapeKind};

    fn tiny_model() -> FullModel {
        let cfg = TrainConfig { stages: 1, epochs: 1, q: 2, encoder: EncoderPreset::Tiny, seed: 3, ..TrainConfig::centers() };
        let patch = PatchSpec::new(8, 8, 8, 8).unwrap();
        let centers: Vec<Sample> = (0..3)
            .map(|i| Sample {
                frame: GrayImage::from_fn(20, 24, |x, y| ((x + y + i) % 5) as f32 / 5.0),
                gt: Shape::new(ShapeKind::Centers17, (0..17).map(|k| Point::new(10.0 + i as f64, k as f64)).collect())
                    .unwrap(),
            })
            .collect();
        let corners: Vec<Sample> = (0..3)
            .map(|i| Sample {
                frame: GrayImage::from_fn(ROI_WIDTH, ROI_HEIGHT, |x, y| ((x * y + i) % 7) as f32 / 7.0),
                gt: Shape::new(
                    ShapeKind::Corners4,
                    vec![
                        Point::new(30.0, 20.0 + i as f64),
                        Point::new(60.0, 21.0),
                        Point::new(31.0, 50.0),
                        Point::new(62.0 - i as f64, 52.0),
                    ],
                )
                .unwrap(),
            })
            .collect();
        let (center_model, _) = train_cascade(&centers, FrameGeometry::WorkingHeight(24), patch, &cfg).unwrap();
        let (corner_model, _) =
            train_cascade(&corners, FrameGeometry::Roi { height: ROI_HEIGHT, width: ROI_WIDTH }, patch, &cfg).unwrap();
        FullModel { center_model, corner_model, preprocess: PreprocessConfig { clahe: None, height: 24 } }
    }

    #[test]
    fn roundtrip_is_identity_and_keeps_seed() {
        let archive = ModelArchive { model: tiny_model(), seed: 77, config: None };
        let bytes = encode_model(&archive).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, archive);
        assert_eq!(back.seed, 77);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_model(&ModelArchive { model: tiny_model(), seed: 1, config: None }).unwrap();
        for pos in [HEADER, HEADER + 100, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(decode_model(&bad), Err(Error::Checksum)), "byte {pos}");
        }
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 5);
        assert!(decode_model(&truncated).is_err());
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode_model(&ModelArchive { model: tiny_model(), seed: 1, config: None }).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_model(&bytes), Err(Error::Version { found: 9, expected: 1 })));
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::Encoding(_))));
    }
}

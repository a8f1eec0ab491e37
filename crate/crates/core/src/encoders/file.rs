//! `TSFT` feature files: the checkpoint record format under its own magic,
//! with records running to end of file.

use std::collections::BTreeMap;
use std::path::Path;

use super::{EncoderError, FeatureBundle};
use crate::tensor::io::{write_header, write_record, FormatError, Reader};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"TSFT";
pub const FEATURE_NAMES: [&str; 6] = ["V_G", "V_L0", "V_L1", "V_L2", "T_G", "T_L"];

pub fn encode_features(b: &FeatureBundle) -> Vec<u8> {
    let mut buf = Vec::new();
    write_header(&mut buf, FEATURE_MAGIC);
    let tensors = [
        &b.visual_global,
        &b.visual_local[0],
        &b.visual_local[1],
        &b.visual_local[2],
        &b.text_global,
        &b.text_local,
    ];
    for (name, t) in FEATURE_NAMES.iter().zip(tensors) {
        write_record(&mut buf, name, t);
    }
    buf
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureBundle, EncoderError> {
    let mut r = Reader::new(bytes);
    r.header(FEATURE_MAGIC)?;
    let mut found: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    while !r.at_end() {
        let (name, t) = r.record()?;
        if !FEATURE_NAMES.contains(&name.as_str()) {
            return Err(EncoderError::UnexpectedTensor(name));
        }
        if found.insert(name.clone(), t).is_some() {
            return Err(FormatError::Malformed(format!("duplicate tensor {name}")).into());
        }
    }
    let mut take = |n: &'static str| found.remove(n).ok_or(EncoderError::MissingTensor(n));
    let b = FeatureBundle {
        visual_global: take("V_G")?,
        visual_local: [take("V_L0")?, take("V_L1")?, take("V_L2")?],
        text_global: take("T_G")?,
        text_local: take("T_L")?,
    };
    b.validate()?;
    Ok(b)
}

pub fn save_features(path: &Path, b: &FeatureBundle) -> Result<(), EncoderError> {
    std::fs::write(path, encode_features(b)).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureBundle, EncoderError> {
    decode_features(&std::fs::read(path).map_err(FormatError::from)?)
}

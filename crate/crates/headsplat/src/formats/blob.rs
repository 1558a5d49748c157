//! Binary prototype list.
//!
//! Little-endian layout:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `HSPR` |
//! | 4 | 4 | version (u32, currently 1) |
//! | 8 | 4 | record count N (u32) |
//! | 12 | 108 N | records |
//!
//! A record is the parent face (u32) followed by 13 f64: offset (3),
//! rotation quaternion w x y z (4), log-scales (2), opacity logit (1),
//! albedo (3).

use std::path::Path;

use headsplat_core::rig::{GaussianPrototype, PROTOTYPE_PARAMS};

use super::{read_bytes, write_file};
use crate::error::{malformed, Result};

pub const MAGIC: &[u8; 4] = b"HSPR";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 12;
pub const RECORD_BYTES: usize = 4 + 8 * PROTOTYPE_PARAMS;

pub fn encode_prototypes(prototypes: &[GaussianPrototype]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + RECORD_BYTES * prototypes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(prototypes.len() as u32).to_le_bytes());
    for p in prototypes {
        out.extend_from_slice(&p.parent_face.to_le_bytes());
        for v in p.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_prototypes(bytes: &[u8]) -> Result<Vec<GaussianPrototype>, String> {
    if bytes.len() < HEADER_BYTES {
        return Err(format!("prototype file is {} bytes, shorter than its header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err(format!("bad magic {:?}, expected {:?}", &bytes[..4], MAGIC));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(format!("prototype file version {version}, this build reads version {VERSION}"));
    }
    let n = u32_at(8) as usize;
    let expected = HEADER_BYTES + n * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(format!(
            "prototype file holds {} bytes, header promises {n} records ({expected} bytes)",
            bytes.len()
        ));
    }
    let mut out = Vec::with_capacity(n);
    for rec in bytes[HEADER_BYTES..].chunks_exact(RECORD_BYTES) {
        let parent = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes"));
        let mut p = [0.0; PROTOTYPE_PARAMS];
        for (k, v) in p.iter_mut().enumerate() {
            *v = f64::from_le_bytes(rec[4 + 8 * k..12 + 8 * k].try_into().expect("8 bytes"));
        }
        out.push(GaussianPrototype::from_params(parent, &p));
    }
    Ok(out)
}

pub fn read_prototypes(path: &Path) -> Result<Vec<GaussianPrototype>> {
    decode_prototypes(&read_bytes(path)?).map_err(|m| malformed(path, m))
}

pub fn write_prototypes(path: &Path, prototypes: &[GaussianPrototype]) -> Result<()> {
    write_file(path, &encode_prototypes(prototypes))
}

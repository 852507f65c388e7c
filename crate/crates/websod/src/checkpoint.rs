//! Versioned binary checkpoints with a schema header, plus SHA-256 digests
//! used for reproducibility checks and frozen-parameter invariants.
//!
//! Layout: an 8-byte magic (`WSODCKP` + format version), a kind byte, then
//! length-prefixed structural metadata and little-endian `f64` tensor data in
//! a fixed field order. Identical parameters always serialize to identical
//! bytes.

use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use sha2::{Digest, Sha256};

use crate::attention::CamBranch;
use crate::detector::{Backbone, DetectorParams, RoiHead, RpnHead};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::rfr::RfrBlock;

const MAGIC: &[u8; 8] = b"WSODCKP1";
const KIND_DETECTOR: u8 = 0;
const KIND_RFR: u8 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_string(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

fn put_conv(buf: &mut Vec<u8>, c: &Conv2d) {
    let (o, i, kh, kw) = c.w.dim();
    for v in [o, i, kh, kw, c.stride, c.pad] {
        put_u32(buf, v);
    }
    put_f64s(buf, c.w.as_slice().unwrap());
    put_f64s(buf, c.b.as_slice().unwrap());
}

fn put_linear(buf: &mut Vec<u8>, l: &Linear) {
    let (o, i) = l.w.dim();
    put_u32(buf, o);
    put_u32(buf, i);
    put_f64s(buf, l.w.as_slice().unwrap());
    put_f64s(buf, l.b.as_slice().unwrap());
}

pub fn serialize_detector(params: &DetectorParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(KIND_DETECTOR);
    put_u32(&mut buf, params.classes.len());
    for name in &params.classes {
        put_string(&mut buf, name);
    }
    put_u32(&mut buf, params.anchor_scales.len());
    put_f64s(&mut buf, &params.anchor_scales);
    put_u32(&mut buf, params.anchor_ratios.len());
    put_f64s(&mut buf, &params.anchor_ratios);
    put_u32(&mut buf, params.roi.pool_size);
    put_u32(&mut buf, params.backbone.convs.len());
    for conv in &params.backbone.convs {
        put_conv(&mut buf, conv);
    }
    put_conv(&mut buf, &params.rpn.conv);
    put_conv(&mut buf, &params.rpn.out);
    put_linear(&mut buf, &params.roi.trunk);
    put_linear(&mut buf, &params.roi.cls);
    put_linear(&mut buf, &params.roi.reg);
    match &params.cam {
        Some(cam) => {
            buf.push(1);
            put_conv(&mut buf, &cam.conv);
            put_linear(&mut buf, &cam.fc);
        }
        None => buf.push(0),
    }
    buf
}

pub fn serialize_rfr(block: &RfrBlock) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(KIND_RFR);
    put_conv(&mut buf, &block.conv1);
    put_conv(&mut buf, &block.conv2);
    put_conv(&mut buf, &block.conv3);
    buf
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        })
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return self.fail(format!("truncated at offset {}", self.pos));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).or_else(|_| self.fail("invalid utf-8 in class name"))
    }

    fn conv(&mut self) -> Result<Conv2d> {
        let o = self.u32()?;
        let i = self.u32()?;
        let kh = self.u32()?;
        let kw = self.u32()?;
        let stride = self.u32()?;
        let pad = self.u32()?;
        let w = self.f64s(o * i * kh * kw)?;
        let b = self.f64s(o)?;
        let w = Array4::from_shape_vec((o, i, kh, kw), w)
            .or_else(|_| self.fail("bad conv shape"))?;
        Ok(Conv2d {
            w,
            b: Array1::from_vec(b),
            stride,
            pad,
        })
    }

    fn linear(&mut self) -> Result<Linear> {
        let o = self.u32()?;
        let i = self.u32()?;
        let w = self.f64s(o * i)?;
        let b = self.f64s(o)?;
        let w = Array2::from_shape_vec((o, i), w).or_else(|_| self.fail("bad linear shape"))?;
        Ok(Linear {
            w,
            b: Array1::from_vec(b),
        })
    }

    fn header(&mut self, expected_kind: u8) -> Result<()> {
        let magic = self.bytes(8)?;
        if magic != MAGIC {
            return self.fail("bad magic or unsupported format version");
        }
        let kind = self.u8()?;
        if kind != expected_kind {
            return self.fail(format!(
                "wrong checkpoint kind {kind} (expected {expected_kind})"
            ));
        }
        Ok(())
    }
}

pub fn deserialize_detector(data: &[u8], path: &Path) -> Result<DetectorParams> {
    let mut r = Reader { data, pos: 0, path };
    r.header(KIND_DETECTOR)?;
    let n_classes = r.u32()?;
    let mut classes = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        classes.push(r.string()?);
    }
    let n = r.u32()?;
    let anchor_scales = r.f64s(n)?;
    let n = r.u32()?;
    let anchor_ratios = r.f64s(n)?;
    let pool_size = r.u32()?;
    let n_layers = r.u32()?;
    let mut convs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        convs.push(r.conv()?);
    }
    let rpn = RpnHead {
        conv: r.conv()?,
        out: r.conv()?,
    };
    let roi = RoiHead {
        trunk: r.linear()?,
        cls: r.linear()?,
        reg: r.linear()?,
        pool_size,
    };
    let cam = match r.u8()? {
        0 => None,
        1 => Some(CamBranch {
            conv: r.conv()?,
            fc: r.linear()?,
        }),
        other => return r.fail(format!("bad cam flag {other}")),
    };
    if roi.cls.w.dim().0 != n_classes + 1 {
        return r.fail(format!(
            "classifier emits {} outputs for {} classes (+1 background expected)",
            roi.cls.w.dim().0,
            n_classes
        ));
    }
    if r.pos != data.len() {
        return r.fail("trailing bytes");
    }
    Ok(DetectorParams {
        classes,
        backbone: Backbone { convs },
        rpn,
        roi,
        cam,
        anchor_scales,
        anchor_ratios,
    })
}

pub fn deserialize_rfr(data: &[u8], path: &Path) -> Result<RfrBlock> {
    let mut r = Reader { data, pos: 0, path };
    r.header(KIND_RFR)?;
    let block = RfrBlock {
        conv1: r.conv()?,
        conv2: r.conv()?,
        conv3: r.conv()?,
    };
    if r.pos != data.len() {
        return r.fail("trailing bytes");
    }
    Ok(block)
}

pub fn save_detector(path: &Path, params: &DetectorParams) -> Result<()> {
    std::fs::write(path, serialize_detector(params)).map_err(|e| Error::io(path, e))
}

pub fn load_detector(path: &Path) -> Result<DetectorParams> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_detector(&data, path)
}

pub fn save_rfr(path: &Path, block: &RfrBlock) -> Result<()> {
    std::fs::write(path, serialize_rfr(block)).map_err(|e| Error::io(path, e))
}

pub fn load_rfr(path: &Path) -> Result<RfrBlock> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_rfr(&data, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the full detector parameter set.
pub fn detector_digest(params: &DetectorParams) -> String {
    sha256_hex(&serialize_detector(params))
}

pub fn rfr_digest(block: &RfrBlock) -> String {
    sha256_hex(&serialize_rfr(block))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&data))
}

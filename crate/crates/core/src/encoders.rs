//! Image and static-feature encoders, plus the image and feature file formats.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Bound, ConvGeometry, Init, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(Error::dim("image", &[height, width], &[pixels.len()]));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Contract("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageRef {
    Inline(GrayImage),
    Precomputed(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub d_img: usize,
    pub d_stat: usize,
    pub static_in: usize,
    /// Length of precomputed feature vectors, when they are used.
    pub feature_dim: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            d_img: 16,
            d_stat: 8,
            static_in: 3,
            feature_dim: None,
        }
    }
}

const CONV_CHANNELS: [usize; 2] = [8, 16];

/// Two strided 3×3 convolutions, global average pool, affine to `d_img`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageEncoder {
    pub size: usize,
    pub convs: Vec<(ConvGeometry, Linear)>,
    pub proj: Linear,
    pub features: Option<Linear>,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let (mut side, mut ch) = (cfg.image_size, 1);
        for (i, &out) in CONV_CHANNELS.iter().enumerate() {
            let geom = ConvGeometry {
                height: side,
                width: side,
                channels: ch,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            convs.push((geom, Linear::new(store, init, &format!("img.conv{i}"), geom.patch_len(), out)?));
            side = geom.out_height();
            ch = out;
        }
        let proj = Linear::new(store, init, "img.proj", ch, cfg.d_img)?;
        let features = cfg
            .feature_dim
            .map(|d| Linear::new(store, init, "img.features", d, cfg.d_img))
            .transpose()?;
        Ok(Self {
            size: cfg.image_size,
            convs,
            proj,
            features,
        })
    }

    /// `[1, d_img]` embedding.
    pub fn encode<'t>(&self, p: &Bound<'t>, img: &ImageRef) -> Result<Var<'t>> {
        let tape = p.vars()[0].tape();
        match img {
            ImageRef::Inline(im) => {
                if im.width != self.size || im.height != self.size {
                    return Err(Error::dim("encode_image", &[self.size, self.size], &[im.height, im.width]));
                }
                let mut x = tape.leaf(Tensor::new(&[im.pixels.len(), 1], im.pixels.clone())?);
                for (geom, lin) in &self.convs {
                    x = lin.forward(p, x.im2col(*geom)?)?.relu();
                }
                self.proj.forward(p, x.mean_rows())
            }
            ImageRef::Precomputed(v) => {
                let lin = self
                    .features
                    .as_ref()
                    .ok_or_else(|| Error::Config("precomputed image features given but feature_dim unset".into()))?;
                if v.len() != lin.in_dim {
                    return Err(Error::dim("encode_image", &[lin.in_dim], &[v.len()]));
                }
                lin.forward(p, tape.leaf(Tensor::new(&[1, v.len()], v.clone())?))
            }
        }
    }
}

/// One hidden layer of width 32, relu, affine to `d_stat`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticEncoder {
    pub mlp: Mlp,
    pub input: usize,
}

impl StaticEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, init, "static", &[cfg.static_in, 32, cfg.d_stat])?,
            input: cfg.static_in,
        })
    }

    /// `[1, d_stat]` embedding.
    pub fn encode<'t>(&self, p: &Bound<'t>, features: &[f64]) -> Result<Var<'t>> {
        if features.len() != self.input {
            return Err(Error::dim("encode_static", &[self.input], &[features.len()]));
        }
        let x = p.vars()[0].tape().leaf(Tensor::new(&[1, self.input], features.to_vec())?);
        self.mlp.forward(p, x)
    }
}

/// Writes a sequence of 8-bit binary PGM images to one file.
pub fn write_pgm(path: &Path, images: &[GrayImage]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for im in images {
        write!(w, "P5\n{} {}\n255\n", im.width, im.height).map_err(io)?;
        let bytes: Vec<u8> = im.pixels.iter().map(|p| (p * 255.0).round() as u8).collect();
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads every image in a (possibly multi-image) binary PGM file.
pub fn read_pgm(path: &Path) -> Result<Vec<GrayImage>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, &path.display().to_string())
}

pub fn parse_pgm(bytes: &[u8], label: &str) -> Result<Vec<GrayImage>> {
    let bad = |msg: &str| Error::format(label, 0, msg);
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let mut images = Vec::new();
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            break;
        }
        if token(&mut pos)? != "P5" {
            return Err(bad("expected P5 magic"));
        }
        let num = |pos: &mut usize| -> Result<usize> {
            token(pos)?.parse().map_err(|_| bad("non-numeric header field"))
        };
        let (w, h, max) = (num(&mut pos)?, num(&mut pos)?, num(&mut pos)?);
        if max == 0 || max > 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        pos += 1;
        let n = w * h;
        if pos + n > bytes.len() {
            return Err(bad("truncated pixel data"));
        }
        let pixels = bytes[pos..pos + n].iter().map(|&b| b as f64 / max as f64).collect();
        pos += n;
        images.push(GrayImage::new(w, h, pixels)?);
    }
    Ok(images)
}

/// Loads `patient_id,f0,f1,...` rows.
pub fn load_precomputed_features(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let label = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(&label, 0, e.to_string()))?;
    let mut map = BTreeMap::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::format(&label, line, e.to_string()))?;
        if i == 0 {
            if rec.get(0) != Some("patient_id") {
                return Err(Error::format(&label, line, "header must start with patient_id"));
            }
            width = Some(rec.len() - 1);
            continue;
        }
        if Some(rec.len() - 1) != width {
            return Err(Error::format(&label, line, "ragged feature row"));
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format(&label, line, "non-numeric feature"))?;
        let id = rec[0].to_string();
        if map.insert(id.clone(), values).is_some() {
            return Err(Error::format(&label, line, format!("duplicate patient id {id}")));
        }
    }
    Ok(map)
}

pub fn write_precomputed_features(path: &Path, features: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let width = features.values().next().map_or(0, Vec::len);
    if features.values().any(|v| v.len() != width) {
        return Err(Error::Contract("feature vectors must share one length".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, 0, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, 0, e.to_string());
    let mut header = vec!["patient_id".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (id, v) in features {
        let mut row = vec![id.clone()];
        row.extend(v.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

//! File formats: 8-bit images, CSV signals and masks, binary parameter and
//! tensor dumps, trace CSV and JSON-lines metric reports.
//!
//! Binary layouts are little-endian throughout.
//!
//! Parameter file:
//! ```text
//! b"MMESPRM\0"  u32 version=1  u32 layers
//! per layer:    u32 out  u32 in  u8 activation (0 linear, 1 leaky)  f64 slope
//!               f64[out·in] weight (row-major)  f64[out] bias
//! u8 has_color; if 1: u32 C  f64[C·C] matrix  f64[C] bias
//! ```
//! Tensor file: `b"MMESTNS\0"  u32 version=1  u32 ndim  u64[ndim] shape  f64[..] data`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Activation, Layer, MlpParams};
use crate::degradation::Mask;
use crate::error::{Error, Result};
use crate::solver::{ColorTransform, ModelParams, TraceRecord};
use crate::tensor::{DenseTensor, Matrix};

const PARAM_MAGIC: &[u8; 8] = b"MMESPRM\0";
const TENSOR_MAGIC: &[u8; 8] = b"MMESTNS\0";
const FORMAT_VERSION: u32 = 1;

/// Loads an 8-bit grayscale (`H × W`) or RGB (`H × W × 3`) image scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let img = image::open(path.as_ref())?;
    let (shape, bytes) = match img {
        DynamicImage::ImageLuma8(g) => (vec![g.height() as usize, g.width() as usize], g.into_raw()),
        DynamicImage::ImageRgb8(c) => (vec![c.height() as usize, c.width() as usize, 3], c.into_raw()),
        other => {
            return Err(Error::UnsupportedImage(format!(
                "{}: {:?} (need 8-bit grayscale or RGB)",
                path.as_ref().display(),
                other.color()
            )))
        }
    };
    DenseTensor::new(shape, bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Clamps to `[0, 1]` and stores `round(255·v)`; the format follows the extension.
pub fn save_image(x: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = x.data().iter().map(|&v| quantize(v)).collect();
    let dyn_img = match *x.shape() {
        [h, w] | [h, w, 1] => DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer")),
        [h, w, 3] => DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer")),
        _ => return Err(Error::UnsupportedImage(format!("cannot store a tensor of shape {:?}", x.shape()))),
    };
    dyn_img.save(path.as_ref())?;
    Ok(())
}

/// A mask image: pixels of at least 128 are observed.
pub fn load_mask_image(path: impl AsRef<Path>) -> Result<Mask> {
    let img = image::open(path.as_ref())?.into_luma8();
    let shape = vec![img.height() as usize, img.width() as usize];
    Mask::new(shape, img.into_raw().into_iter().map(|b| b >= 128).collect())
}

/// Observed pixels as 255, missing as 0. Only 2-D masks are stored.
pub fn save_mask_image(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let &[h, w] = m.shape() else {
        return Err(Error::UnsupportedImage(format!("mask of shape {:?}", m.shape())));
    };
    let bytes = m.observed().iter().map(|&o| if o { 255 } else { 0 }).collect();
    GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer").save(path.as_ref())?;
    Ok(())
}

fn read_values(path: &Path) -> Result<Vec<f64>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        match s.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if n == 0 => continue,
            Err(_) => return Err(Error::Format(format!("{}:{}: not a number: {s:?}", path.display(), n + 1))),
        }
    }
    Ok(out)
}

/// One value per line; a non-numeric first line is taken as a header.
pub fn load_signal_csv(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let v = read_values(path.as_ref())?;
    if v.is_empty() {
        return Err(Error::Format(format!("{}: no values", path.as_ref().display())));
    }
    DenseTensor::new(vec![v.len()], v)
}

pub fn save_signal_csv(x: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in x.data() {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mask_csv(path: impl AsRef<Path>) -> Result<Mask> {
    let v = read_values(path.as_ref())?;
    if let Some(bad) = v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::Format(format!("{}: mask entry {bad} is not 0 or 1", path.as_ref().display())));
    }
    Mask::new(vec![v.len()], v.iter().map(|&x| x == 1.0).collect())
}

pub fn save_mask_csv(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &o in m.observed() {
        writeln!(w, "{}", o as u8)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if &self.bytes::<8>()? != magic {
            return Err(Error::Format("bad magic".into()));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_params(p: &ModelParams, w: &mut impl Write) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(p.ae.layers().len() as u32).to_le_bytes())?;
    for l in p.ae.layers() {
        w.write_all(&(l.weight.rows() as u32).to_le_bytes())?;
        w.write_all(&(l.weight.cols() as u32).to_le_bytes())?;
        let (tag, slope) = match l.activation {
            Activation::Identity => (0u8, 0.0),
            Activation::LeakyRelu { slope } => (1u8, slope),
        };
        w.write_all(&[tag])?;
        w.write_all(&slope.to_le_bytes())?;
        put_f64s(w, l.weight.data())?;
        put_f64s(w, &l.bias)?;
    }
    match &p.color {
        None => w.write_all(&[0])?,
        Some(c) => {
            w.write_all(&[1])?;
            w.write_all(&(c.channels() as u32).to_le_bytes())?;
            put_f64s(w, c.matrix.data())?;
            put_f64s(w, &c.bias)?;
        }
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<ModelParams> {
    let mut r = Reader { inner: r };
    r.header(PARAM_MAGIC)?;
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let tag = r.u8()?;
        let slope = f64::from_le_bytes(r.bytes()?);
        let activation = match tag {
            0 => Activation::Identity,
            1 => Activation::LeakyRelu { slope },
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        };
        let weight = Matrix::new(rows, cols, r.f64s(rows * cols)?)?;
        let bias = r.f64s(rows)?;
        layers.push(Layer { weight, bias, activation });
    }
    let ae = MlpParams::from_layers(layers)?;
    let color = match r.u8()? {
        0 => None,
        1 => {
            let c = r.u32()? as usize;
            let matrix = Matrix::new(c, c, r.f64s(c * c)?)?;
            let bias = r.f64s(c)?;
            Some(ColorTransform { matrix, bias })
        }
        t => return Err(Error::Format(format!("bad color flag {t}"))),
    };
    Ok(ModelParams { ae, color })
}

pub fn save_params(p: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(p, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_params(&mut BufReader::new(File::open(path)?))
}

pub fn save_tensor(x: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(x.ndim() as u32).to_le_bytes())?;
    for &d in x.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    put_f64s(&mut w, x.data())?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    r.header(TENSOR_MAGIC)?;
    let ndim = r.u32()? as usize;
    let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
    let n = shape.iter().product();
    DenseTensor::new(shape, r.f64s(n)?)
}

pub const TRACE_HEADER: &str = "iter,l_rec,l_ae,lambda,lr,psnr";

pub fn write_trace(trace: &[TraceRecord], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for t in trace {
        let psnr = t.psnr.map(|p| p.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", t.iter, t.l_rec, t.l_ae, t.lambda, t.lr, psnr)?;
    }
    Ok(())
}

pub fn save_trace(trace: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == TRACE_HEADER => {}
        _ => return Err(Error::Format("missing trace header".into())),
    }
    let bad = |n: usize| Error::Format(format!("malformed trace line {}", n + 2));
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(n));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n));
        out.push(TraceRecord {
            iter: f[0].parse().map_err(|_| bad(n))?,
            l_rec: num(f[1])?,
            l_ae: num(f[2])?,
            lambda: num(f[3])?,
            lr: num(f[4])?,
            psnr: if f[5].is_empty() { None } else { Some(num(f[5])?) },
        });
    }
    Ok(out)
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub image: String,
    /// `None` when no ground truth was given or the match is exact.
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    #[serde(default)]
    pub mse: Option<f64>,
    /// Sweep point label; empty for a single run.
    #[serde(default)]
    pub label: String,
    pub iters: usize,
    pub seconds: f64,
}

/// Appends one JSON object per line.
pub fn append_report(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let mut line = serde_json::to_string(report).map_err(|e| Error::Format(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(out)
}

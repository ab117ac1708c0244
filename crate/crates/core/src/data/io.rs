//! Sample files: a little-endian binary container and a CSV fallback.
//!
//! Binary layout:
//!
//! ```text
//! magic     8 bytes  "GAFPC001"
//! count     u64      number of points
//! meta_len  u32      then meta_len bytes of TOML metadata
//! channels  u32      then per channel: u16 name length, name, u32 width, u8 dtype
//! payloads           per channel in manifest order, count × width values
//! ```
//!
//! CSV files carry the metadata as leading `# ` comment lines in TOML syntax,
//! then a header with one column per component (`name` or `name.k`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};
use crate::tensor::{Array, Real};

pub const MAGIC: &[u8; 8] = b"GAFPC001";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
    U32,
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U32 => 2,
            Dtype::U8 => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::U32,
            3 => Dtype::U8,
            _ => return Err(Error::format(format!("unknown dtype code {c}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

const POSITION: &str = "position";
const NORMAL: &str = "normal";
const AREA: &str = "area";
const PART: &str = "part";
const SURFACE: &str = "surface";
const SDF: &str = "sdf";

/// One named column block with its values promoted to `Real`.
#[derive(Clone, Debug, PartialEq)]
struct Channel {
    name: String,
    width: usize,
    dtype: Dtype,
    values: Vec<Real>,
}

fn flatten(points: &[Point]) -> Vec<Real> {
    points.iter().flatten().copied().collect()
}

fn points(values: &[Real]) -> Vec<Point> {
    values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn channels(sample: &Sample, float: Dtype) -> Vec<Channel> {
    let pc = &sample.cloud;
    let ch = |name: &str, width, dtype, values| Channel {
        name: name.to_string(),
        width,
        dtype,
        values,
    };
    let mut out = vec![ch(POSITION, 3, float, flatten(pc.positions()))];
    if let Some(n) = pc.normals() {
        out.push(ch(NORMAL, 3, float, flatten(n)));
    }
    if let Some(a) = pc.areas() {
        out.push(ch(AREA, 1, float, a.to_vec()));
    }
    if let Some(p) = pc.parts() {
        out.push(ch(PART, 1, Dtype::U32, p.iter().map(|&v| v as Real).collect()));
    }
    if let Some(s) = pc.surface_flags() {
        out.push(ch(SURFACE, 1, Dtype::U8, s.iter().map(|&v| v as u8 as Real).collect()));
    }
    if let Some(s) = pc.sdf() {
        out.push(ch(SDF, 1, float, s.to_vec()));
    }
    for (name, a) in &sample.fields {
        let name = if RESERVED.contains(&name.as_str()) {
            format!("field.{name}")
        } else {
            name.clone()
        };
        out.push(ch(&name, a.cols(), float, a.data().to_vec()));
    }
    out
}

const RESERVED: [&str; 6] = [POSITION, NORMAL, AREA, PART, SURFACE, SDF];

fn assemble(meta: SampleMeta, count: usize, chans: Vec<Channel>) -> Result<Sample> {
    let mut map: BTreeMap<String, Channel> = BTreeMap::new();
    for c in chans {
        if c.values.len() != count * c.width {
            return Err(Error::format(format!("channel {} has the wrong length", c.name)));
        }
        if map.insert(c.name.clone(), c).is_some() {
            return Err(Error::format("duplicate channel name"));
        }
    }
    let mut take = |name: &str, width: usize| -> Result<Option<Vec<Real>>> {
        match map.remove(name) {
            Some(c) if c.width != width => Err(Error::format(format!(
                "channel {name} has width {}, expected {width}",
                c.width
            ))),
            Some(c) => Ok(Some(c.values)),
            None => Ok(None),
        }
    };
    let pos = take(POSITION, 3)?.ok_or_else(|| Error::format("missing position channel"))?;
    let mut cloud = PointCloud::new(points(&pos))?;
    if let Some(n) = take(NORMAL, 3)? {
        cloud = cloud.with_normals(points(&n))?;
    }
    let area = take(AREA, 1)?;
    let mut fields = BTreeMap::new();
    if let Some(a) = area {
        if a.iter().all(|&v| v > 0.0) {
            cloud = cloud.with_areas(a)?;
        } else {
            fields.insert(AREA.to_string(), Array::new(vec![count, 1], a)?);
        }
    }
    if let Some(p) = take(PART, 1)? {
        cloud = cloud.with_parts(p.iter().map(|&v| v as u32).collect())?;
    }
    if let Some(s) = take(SURFACE, 1)? {
        cloud = cloud.with_surface_flags(s.iter().map(|&v| v != 0.0).collect())?;
    }
    if let Some(s) = take(SDF, 1)? {
        cloud = cloud.with_sdf(s)?;
    }
    for (name, c) in map {
        let name = name.strip_prefix("field.").unwrap_or(&name).to_string();
        fields.insert(name, Array::new(vec![count, c.width], c.values)?);
    }
    Ok(Sample { meta, cloud, fields })
}

/// Encodes a sample; float channels use `float` (`F32` or `F64`).
pub fn to_bytes(sample: &Sample, float: Dtype) -> Result<Vec<u8>> {
    if !matches!(float, Dtype::F32 | Dtype::F64) {
        return Err(Error::arg("float channels must be stored as f32 or f64"));
    }
    let n = sample.cloud.len();
    let meta = toml::to_string(&sample.meta).map_err(|e| Error::format(e.to_string()))?;
    let chans = channels(sample, float);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(chans.len() as u32).to_le_bytes());
    for c in &chans {
        let name = c.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(c.width as u32).to_le_bytes());
        out.push(c.dtype.code());
    }
    for c in &chans {
        for &v in &c.values {
            match c.dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
                Dtype::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
                Dtype::U8 => out.push(v as u8),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("truncated point-cloud file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn text(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8 in header"))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Sample> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("not a point-cloud container (bad magic)"));
    }
    let count = usize::try_from(r.u64()?).map_err(|_| Error::format("point count too large"))?;
    let meta_len = r.u32()? as usize;
    let meta_text = r.text(meta_len)?;
    let meta: SampleMeta = toml::from_str(&meta_text).map_err(|e| Error::format(format!("metadata: {e}")))?;
    let nch = r.u32()? as usize;
    let mut manifest = Vec::new();
    for _ in 0..nch {
        let len = r.u16()? as usize;
        let name = r.text(len)?;
        let width = r.u32()? as usize;
        let dtype = Dtype::from_code(r.u8()?)?;
        manifest.push((name, width, dtype));
    }
    let mut chans = Vec::with_capacity(nch);
    for (name, width, dtype) in manifest {
        let total = count
            .checked_mul(width)
            .ok_or_else(|| Error::format("channel size overflow"))?;
        let bytes = r.take(
            total
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::format("channel size overflow"))?,
        )?;
        let values = bytes
            .chunks_exact(dtype.size())
            .map(|b| match dtype {
                Dtype::F32 => f32::from_le_bytes(b.try_into().unwrap()) as Real,
                Dtype::F64 => f64::from_le_bytes(b.try_into().unwrap()) as Real,
                Dtype::U32 => u32::from_le_bytes(b.try_into().unwrap()) as Real,
                Dtype::U8 => b[0] as Real,
            })
            .collect();
        chans.push(Channel {
            name,
            width,
            dtype,
            values,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::format("trailing bytes after payload"));
    }
    assemble(meta, count, chans)
}

/// CSV text with metadata comments and one column per component.
pub fn to_csv(sample: &Sample) -> Result<String> {
    let meta = toml::to_string(&sample.meta).map_err(|e| Error::format(e.to_string()))?;
    let mut out = String::new();
    for line in meta.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    let chans = channels(sample, Dtype::F64);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = chans
        .iter()
        .flat_map(|c| {
            (0..c.width).map(move |k| {
                if c.width == 1 {
                    c.name.clone()
                } else {
                    format!("{}.{k}", c.name)
                }
            })
        })
        .collect();
    w.write_record(&header)?;
    for i in 0..sample.cloud.len() {
        let row: Vec<String> = chans
            .iter()
            .flat_map(|c| {
                c.values[i * c.width..(i + 1) * c.width]
                    .iter()
                    .map(|v| format!("{v:?}"))
            })
            .collect();
        w.write_record(&row)?;
    }
    let body = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
    out.push_str(std::str::from_utf8(&body).expect("csv writes UTF-8"));
    Ok(out)
}

pub fn from_csv(text: &str) -> Result<Sample> {
    let mut meta_text = String::new();
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        match line.strip_prefix('#') {
            Some(rest) => {
                meta_text.push_str(rest.strip_prefix(' ').unwrap_or(rest));
                body_start += line.len();
            }
            None => break,
        }
    }
    let meta: SampleMeta = toml::from_str(&meta_text).map_err(|e| Error::format(format!("metadata: {e}")))?;
    let mut rd = csv::Reader::from_reader(text[body_start..].as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    // column blocks in header order: (name, first column, width)
    let mut blocks: Vec<(String, usize, usize)> = Vec::new();
    for (col, h) in header.iter().enumerate() {
        let (name, k) = match h.rsplit_once('.') {
            Some((n, k)) if k.parse::<usize>().is_ok() => (n.to_string(), k.parse::<usize>().unwrap()),
            _ => (h.clone(), 0),
        };
        match blocks.last_mut() {
            Some((last, start, width)) if *last == name && k == *width && col == *start + *width => *width += 1,
            _ if k == 0 => blocks.push((name, col, 1)),
            _ => return Err(Error::format(format!("column {h} is out of order"))),
        }
    }
    let mut values: Vec<Vec<Real>> = vec![Vec::new(); blocks.len()];
    let mut count = 0;
    for rec in rd.records() {
        let rec = rec?;
        for (b, (_, start, width)) in blocks.iter().enumerate() {
            for k in 0..*width {
                let s = rec.get(start + k).ok_or_else(|| Error::format("short CSV row"))?;
                let v: Real = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(format!("bad number {s:?} in column {}", header[start + k])))?;
                values[b].push(v);
            }
        }
        count += 1;
    }
    let chans = blocks
        .into_iter()
        .zip(values)
        .map(|((name, _, width), values)| Channel {
            name,
            width,
            dtype: Dtype::F64,
            values,
        })
        .collect();
    assemble(meta, count, chans)
}

/// Writes by extension: `.csv` as CSV, anything else as the binary container.
pub fn write_sample(path: &Path, sample: &Sample, float: Dtype) -> Result<()> {
    let bytes = if is_csv(path) {
        to_csv(sample)?.into_bytes()
    } else {
        to_bytes(sample, float)?
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    let bytes = fs::read(path)?;
    let mut s = if is_csv(path) {
        from_csv(std::str::from_utf8(&bytes).map_err(|_| Error::format("CSV is not UTF-8"))?)?
    } else {
        from_bytes(&bytes)?
    };
    if s.meta.name.is_empty() {
        s.meta.name = path
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(s)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Sample files in a directory, sorted by file name.
pub fn list_samples(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e == "gpc" || e.eq_ignore_ascii_case("csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

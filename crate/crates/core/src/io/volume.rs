use std::fs;
use std::path::{Path, PathBuf};

use crate::deform::Deformation;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, ScalarField, VectorField};
use crate::objectives::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    Float64,
    UInt16,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Float32 => "MET_FLOAT",
            ElementType::Float64 => "MET_DOUBLE",
            ElementType::UInt16 => "MET_USHORT",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "MET_FLOAT" => Ok(ElementType::Float32),
            "MET_DOUBLE" => Ok(ElementType::Float64),
            "MET_USHORT" => Ok(ElementType::UInt16),
            _ => Err(Error::Unsupported {
                field: "ElementType".into(),
                value: tag.into(),
            }),
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Float64 => 8,
            ElementType::UInt16 => 2,
        }
    }
}

/// Contents of a volume file.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarField),
    Labels(LabelMap),
    /// Multi-channel volume, one component per channel.
    Vector(VectorField),
}

struct Header {
    grid: GridSpec,
    channels: usize,
    element: ElementType,
    data_file: String,
}

fn header_text(grid: &GridSpec, channels: usize, element: ElementType, data_file: &str) -> String {
    let join = |v: Vec<String>| v.join(" ");
    let mut h = String::new();
    h.push_str("ObjectType = Image\n");
    h.push_str(&format!("NDims = {}\n", grid.ndim()));
    h.push_str(&format!("DimSize = {}\n", join(grid.dims().iter().map(|d| d.to_string()).collect())));
    h.push_str(&format!(
        "ElementSpacing = {}\n",
        join(grid.spacing().iter().map(|s| format!("{s:?}")).collect())
    ));
    if channels > 1 {
        h.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    h.push_str("BinaryData = True\n");
    h.push_str("BinaryDataByteOrderMSB = False\n");
    h.push_str(&format!("ElementType = {}\n", element.tag()));
    h.push_str(&format!("ElementDataFile = {data_file}\n"));
    h
}

/// Planar channels to voxel-interleaved little-endian bytes.
fn encode_payload(values: &[f64], channels: usize, element: ElementType) -> Vec<u8> {
    let n = values.len() / channels;
    let mut out = Vec::with_capacity(values.len() * element.size());
    for i in 0..n {
        for c in 0..channels {
            let v = values[c * n + i];
            match element {
                ElementType::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                ElementType::Float64 => out.extend_from_slice(&v.to_le_bytes()),
                ElementType::UInt16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            }
        }
    }
    out
}

fn decode_payload(bytes: &[u8], channels: usize, element: ElementType) -> Vec<f64> {
    let size = element.size();
    let n = bytes.len() / size / channels;
    let mut out = vec![0.0; n * channels];
    for (k, chunk) in bytes.chunks_exact(size).enumerate() {
        let v = match element {
            ElementType::Float32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
            ElementType::Float64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            ElementType::UInt16 => u16::from_le_bytes(chunk.try_into().expect("2 bytes")) as f64,
        };
        out[(k % channels) * n + k / channels] = v;
    }
    out
}

/// Writes `values` (planar, `channels` per voxel). A `.mha` path gets the
/// payload inline; any other extension gets a sibling `.raw` file.
fn write_raw(path: &Path, grid: &GridSpec, channels: usize, values: &[f64], element: ElementType) -> Result<()> {
    let payload = encode_payload(values, channels, element);
    let local = path.extension().is_some_and(|e| e == "mha");
    if local {
        let mut bytes = header_text(grid, channels, element, "LOCAL").into_bytes();
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes)?;
    } else {
        let raw = path.with_extension("raw");
        let name = raw
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad volume path {}", path.display())))?
            .to_string();
        fs::write(path, header_text(grid, channels, element, &name))?;
        fs::write(raw, payload)?;
    }
    Ok(())
}

fn parse_header(text: &str) -> Result<Header> {
    let mut fields: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse("header", format!("line without '=': {line:?}")))?;
        fields.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |key: &str| fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let need = |key: &str| get(key).ok_or_else(|| Error::parse(key, "missing"));
    let ndims: usize = need("NDims")?
        .parse()
        .map_err(|_| Error::parse("NDims", "not an integer"))?;
    if !(2..=3).contains(&ndims) {
        return Err(Error::Unsupported {
            field: "NDims".into(),
            value: ndims.to_string(),
        });
    }
    let list = |key: &str| -> Result<Vec<f64>> {
        let v: Vec<f64> = need(key)?
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(key, format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != ndims {
            return Err(Error::parse(key, format!("expected {ndims} values, got {}", v.len())));
        }
        Ok(v)
    };
    let dims: Vec<usize> = list("DimSize")?
        .into_iter()
        .map(|d| {
            if d >= 1.0 && d.fract() == 0.0 {
                Ok(d as usize)
            } else {
                Err(Error::parse("DimSize", format!("bad size {d}")))
            }
        })
        .collect::<Result<_>>()?;
    let spacing = if get("ElementSpacing").is_some() {
        list("ElementSpacing")?
    } else {
        vec![1.0; ndims]
    };
    let grid = GridSpec::new(&dims, &spacing).map_err(|e| Error::parse("DimSize", e.to_string()))?;
    let channels = match get("ElementNumberOfChannels") {
        Some(c) => c
            .parse::<usize>()
            .ok()
            .filter(|&c| c >= 1)
            .ok_or_else(|| Error::parse("ElementNumberOfChannels", format!("bad value {c:?}")))?,
        None => 1,
    };
    for key in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
        if let Some(v) = get(key) {
            if !v.eq_ignore_ascii_case("false") {
                return Err(Error::Unsupported {
                    field: key.into(),
                    value: v.into(),
                });
            }
        }
    }
    if let Some(v) = get("CompressedData") {
        if !v.eq_ignore_ascii_case("false") {
            return Err(Error::Unsupported {
                field: "CompressedData".into(),
                value: v.into(),
            });
        }
    }
    let element = ElementType::from_tag(need("ElementType")?)?;
    let data_file = need("ElementDataFile")?.to_string();
    Ok(Header {
        grid,
        channels,
        element,
        data_file,
    })
}

fn read_raw(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = fs::read(path)?;
    // the header ends with the ElementDataFile line
    let mut end = None;
    let mut pos = 0;
    while pos < bytes.len() {
        let nl = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| pos + i);
        if bytes[pos..nl].starts_with(b"ElementDataFile") {
            end = Some((nl + 1).min(bytes.len()));
            break;
        }
        pos = nl + 1;
    }
    let end = end.ok_or_else(|| Error::parse("ElementDataFile", "missing"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::parse("header", "not UTF-8"))?;
    let header = parse_header(text)?;
    let payload: Vec<u8> = if header.data_file == "LOCAL" {
        bytes[end..].to_vec()
    } else {
        let sibling: PathBuf = path.parent().unwrap_or(Path::new(".")).join(&header.data_file);
        fs::read(sibling)?
    };
    let expected = header.grid.voxel_count() * header.channels * header.element.size();
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::parse(
            "ElementDataFile",
            format!("{} bytes of payload, expected {expected}", payload.len()),
        ));
    }
    let values = decode_payload(&payload, header.channels, header.element);
    Ok((header, values))
}

/// Reads a MetaImage volume. `MET_USHORT` files are label maps and
/// multi-channel files are vector fields.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (h, values) = read_raw(path.as_ref())?;
    if h.channels > 1 {
        if h.element == ElementType::UInt16 {
            return Err(Error::Unsupported {
                field: "ElementType".into(),
                value: "multi-channel MET_USHORT".into(),
            });
        }
        if h.channels != h.grid.ndim() {
            return Err(Error::parse(
                "ElementNumberOfChannels",
                format!("{} channels on a {}D grid", h.channels, h.grid.ndim()),
            ));
        }
        return Ok(Volume::Vector(VectorField::new(h.grid, values)?));
    }
    match h.element {
        ElementType::UInt16 => Ok(Volume::Labels(LabelMap::new(
            h.grid,
            values.into_iter().map(|v| v as u16).collect(),
        )?)),
        _ => Ok(Volume::Scalar(ScalarField::new(h.grid, values)?)),
    }
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarField> {
    match read_volume(path.as_ref())? {
        Volume::Scalar(f) => Ok(f),
        _ => Err(Error::parse("ElementType", format!("{} is not a scalar image", path.as_ref().display()))),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    match read_volume(path.as_ref())? {
        Volume::Labels(l) => Ok(l),
        _ => Err(Error::parse("ElementType", format!("{} is not a MET_USHORT label map", path.as_ref().display()))),
    }
}

pub fn read_deformation(path: impl AsRef<Path>) -> Result<Deformation> {
    match read_volume(path.as_ref())? {
        Volume::Vector(v) => Ok(Deformation::from_displacement(v)),
        _ => Err(Error::parse(
            "ElementNumberOfChannels",
            format!("{} is not a vector volume", path.as_ref().display()),
        )),
    }
}

/// Writes an intensity image as `MET_FLOAT` or `MET_DOUBLE`.
pub fn write_scalar(path: impl AsRef<Path>, field: &ScalarField, element: ElementType) -> Result<()> {
    if element == ElementType::UInt16 {
        return Err(Error::InvalidArgument("intensity images are written as float types".into()));
    }
    write_raw(path.as_ref(), field.grid(), 1, field.values(), element)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let values: Vec<f64> = labels.labels().iter().map(|&l| l as f64).collect();
    write_raw(path.as_ref(), labels.grid(), 1, &values, ElementType::UInt16)
}

/// Writes the displacement of `phi` as a `D`-channel volume.
pub fn write_deformation(path: impl AsRef<Path>, phi: &Deformation, element: ElementType) -> Result<()> {
    if element == ElementType::UInt16 {
        return Err(Error::InvalidArgument("deformations are written as float types".into()));
    }
    let grid = phi.grid();
    write_raw(path.as_ref(), grid, grid.ndim(), phi.displacement().values(), element)
}

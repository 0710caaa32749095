//! MetaImage (`.mhd` + `.raw`) reader and writer for the uncompressed,
//! little-endian, single-channel 3D subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Grid, LabelVolume, Volume3D};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    /// `MET_SHORT`, little-endian i16.
    Short,
    /// `MET_FLOAT`, little-endian f32.
    Float,
    /// `MET_UCHAR`, u8.
    UChar,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::UChar => "MET_UCHAR",
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
            ElementType::UChar => 1,
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_FLOAT" => Ok(ElementType::Float),
            "MET_UCHAR" => Ok(ElementType::UChar),
            other => Err(Error::format(format!("unsupported ElementType '{other}'"))),
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            ElementType::Short => bytes
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64)
                .collect(),
            ElementType::Float => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            ElementType::UChar => bytes.iter().map(|&b| b as f64).collect(),
        }
    }

    fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        for &v in values {
            match self {
                ElementType::Short => {
                    let s = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                    out.extend_from_slice(&s.to_le_bytes());
                }
                ElementType::Float => out.extend_from_slice(&(v as f32).to_le_bytes()),
                ElementType::UChar => out.push(v.round().clamp(0.0, 255.0) as u8),
            }
        }
        out
    }
}

/// Keys accepted besides the required set. Anything else is rejected.
const OPTIONAL_KEYS: &[&str] = &[
    "Offset",
    "Origin",
    "Position",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementByteOrderMSB",
    "CompressedData",
    "ElementNumberOfChannels",
    "TransformMatrix",
    "CenterOfRotation",
    "AnatomicalOrientation",
];

const REQUIRED_KEYS: &[&str] = &[
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementSpacing",
    "ElementType",
    "ElementDataFile",
];

fn parse_header(text: &str) -> Result<BTreeMap<String, String>> {
    let mut fields = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("header line {} has no '='", lineno + 1)))?;
        let key = key.trim();
        if !REQUIRED_KEYS.contains(&key) && !OPTIONAL_KEYS.contains(&key) {
            return Err(Error::format(format!("unknown header key '{key}'")));
        }
        if fields.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::format(format!("duplicate header key '{key}'")));
        }
    }
    for key in REQUIRED_KEYS {
        if !fields.contains_key(*key) {
            return Err(Error::format(format!("missing header key '{key}'")));
        }
    }
    Ok(fields)
}

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(format!("{key}: cannot parse '{value}'")))?;
    parts
        .try_into()
        .map_err(|_| Error::format(format!("{key}: expected 3 values, got '{value}'")))
}

fn expect_flag(fields: &BTreeMap<String, String>, key: &str, want: &str) -> Result<()> {
    match fields.get(key) {
        Some(v) if !v.eq_ignore_ascii_case(want) => Err(Error::format(format!(
            "{key} = {v} is not supported (only {want})"
        ))),
        _ => Ok(()),
    }
}

/// Reads a volume and reports the element type it was stored with.
pub fn read_volume_typed(path: impl AsRef<Path>) -> Result<(Volume3D, ElementType)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let fields = parse_header(&text)?;

    if fields["ObjectType"] != "Image" {
        return Err(Error::format(format!("ObjectType must be Image, got '{}'", fields["ObjectType"])));
    }
    if fields["NDims"] != "3" {
        return Err(Error::format(format!("NDims must be 3, got '{}'", fields["NDims"])));
    }
    expect_flag(&fields, "BinaryData", "True")?;
    expect_flag(&fields, "BinaryDataByteOrderMSB", "False")?;
    expect_flag(&fields, "ElementByteOrderMSB", "False")?;
    expect_flag(&fields, "CompressedData", "False")?;
    expect_flag(&fields, "ElementNumberOfChannels", "1")?;

    let dims: [usize; 3] = parse_triple("DimSize", &fields["DimSize"])?;
    let spacing: [f64; 3] = parse_triple("ElementSpacing", &fields["ElementSpacing"])?;
    let origin_key = ["Offset", "Origin", "Position"]
        .into_iter()
        .find(|k| fields.contains_key(*k));
    let origin: [f64; 3] = match origin_key {
        Some(k) => parse_triple(k, &fields[k])?,
        None => [0.0; 3],
    };
    let grid = Grid::new(dims, spacing, origin).map_err(|e| Error::format(e.to_string()))?;
    let etype = ElementType::from_tag(&fields["ElementType"])?;

    let data_name = &fields["ElementDataFile"];
    if data_name.eq_ignore_ascii_case("LOCAL") || data_name.starts_with("LIST") {
        return Err(Error::format(format!("ElementDataFile = {data_name} is not supported")));
    }
    let raw_path = path.parent().unwrap_or(Path::new(".")).join(data_name);
    let bytes = fs::read(&raw_path).map_err(|e| Error::file(&raw_path, e))?;
    let expected = (grid.len() * etype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let vol = Volume3D::new(grid, etype.decode(&bytes))?;
    Ok((vol, etype))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    read_volume_typed(path).map(|(v, _)| v)
}

/// Raw data file that accompanies a header path.
fn raw_path_for(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

/// Writes `path` (the header) and a sibling `.raw` file.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>, etype: ElementType) -> Result<()> {
    write_raw(vol.grid(), &etype.encode(vol.voxels()), path.as_ref(), etype)
}

fn write_raw(grid: &Grid, bytes: &[u8], path: &Path, etype: ElementType) -> Result<()> {
    let raw = raw_path_for(path);
    if raw == path {
        return Err(Error::config(format!(
            "{}: header path must not end in .raw",
            path.display()
        )));
    }
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::config(format!("{}: not a file path", path.display())))?;
    let fmt3 = |v: &[f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         Offset = {}\n\
         ElementSpacing = {}\n\
         DimSize = {} {} {}\n\
         ElementType = {}\n\
         ElementDataFile = {}\n",
        fmt3(&grid.origin),
        fmt3(&grid.spacing),
        grid.dims[0],
        grid.dims[1],
        grid.dims[2],
        etype.tag(),
        raw_name
    );
    fs::write(path, header).map_err(|e| Error::file(path, e))?;
    fs::write(&raw, bytes).map_err(|e| Error::file(&raw, e))?;
    Ok(())
}

pub fn write_label(label: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_raw(label.grid(), label.voxels(), path.as_ref(), ElementType::UChar)
}

pub fn read_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let vol = read_volume(path)?;
    let grid = *vol.grid();
    let voxels = vol
        .into_voxels()
        .into_iter()
        .map(|v| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(Error::format(format!("label value {v} is not 0 or 1")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelVolume::new(grid, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_requires_all_keys() {
        let err = parse_header("ObjectType = Image\nNDims = 3\n").unwrap_err();
        assert!(err.to_string().contains("missing header key"));
    }

    #[test]
    fn header_rejects_unknown_key() {
        let err = parse_header("Colour = Blue\n").unwrap_err();
        assert!(err.to_string().contains("unknown header key"));
    }

    #[test]
    fn short_encoding_saturates() {
        let bytes = ElementType::Short.encode(&[40000.0, -1.4, -40000.0]);
        assert_eq!(ElementType::Short.decode(&bytes), vec![32767.0, -1.0, -32768.0]);
    }
}

//! MetaImage (`.mhd` + `.raw`, or single-file `.mha`) reader and writer.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "MET_CHAR" => ElementType::I8,
            "MET_UCHAR" => ElementType::U8,
            "MET_SHORT" => ElementType::I16,
            "MET_USHORT" => ElementType::U16,
            "MET_INT" | "MET_LONG" => ElementType::I32,
            "MET_UINT" | "MET_ULONG" => ElementType::U32,
            other => {
                return Err(Error::UnsupportedHeaderValue {
                    key: "ElementType",
                    value: other.to_string(),
                })
            }
        })
    }

    fn width(self) -> usize {
        match self {
            ElementType::I8 | ElementType::U8 => 1,
            ElementType::I16 | ElementType::U16 => 2,
            ElementType::I32 | ElementType::U32 => 4,
        }
    }
}

struct Header {
    fields: HashMap<String, String>,
    /// Byte offset of the data when `ElementDataFile = LOCAL`.
    local_data_offset: usize,
}

impl Header {
    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut fields = HashMap::new();
        let mut pos = 0;
        let mut local_data_offset = 0;
        while pos < bytes.len() {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(bytes.len(), |i| pos + i + 1);
            let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| Error::MalformedHeader {
                key: "<header>".into(),
                reason: "header is not valid UTF-8".into(),
            })?;
            pos = end;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedHeader {
                key: line.to_string(),
                reason: "expected `Key = Value`".into(),
            })?;
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim().to_string();
            let is_data_file = key == "elementdatafile";
            fields.insert(key, value);
            // ElementDataFile is always the last header line.
            if is_data_file {
                local_data_offset = pos;
                break;
            }
        }
        Ok(Header {
            fields,
            local_data_offset,
        })
    }

    fn get(&self, key: &'static str) -> Option<&str> {
        self.fields.get(&key.to_ascii_lowercase()).map(String::as_str)
    }

    fn require(&self, key: &'static str) -> Result<&str> {
        self.get(key).ok_or(Error::MissingHeaderKey { key })
    }

    fn floats<const N: usize>(&self, key: &'static str) -> Result<Option<[f64; N]>> {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        let vals: Vec<f64> = raw
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedHeader {
                key: key.into(),
                reason: format!("`{raw}`: {e}"),
            })?;
        if vals.len() != N {
            return Err(Error::MalformedHeader {
                key: key.into(),
                reason: format!("expected {N} values, got {}", vals.len()),
            });
        }
        Ok(Some(std::array::from_fn(|i| vals[i])))
    }

    fn bool_flag(&self, key: &'static str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) if v.eq_ignore_ascii_case("true") => Ok(Some(true)),
            Some(v) if v.eq_ignore_ascii_case("false") => Ok(Some(false)),
            Some(v) => Err(Error::MalformedHeader {
                key: key.into(),
                reason: format!("expected True/False, got `{v}`"),
            }),
        }
    }
}

/// Reads a MetaImage header and its voxel data. The series id is the
/// header's file stem; slice thickness is the z spacing.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = Header::parse(&bytes)?;

    let ndims = header.require("NDims")?;
    if ndims != "3" {
        return Err(Error::UnsupportedHeaderValue {
            key: "NDims",
            value: ndims.to_string(),
        });
    }
    let dims = header.floats::<3>("DimSize")?.ok_or(Error::MissingHeaderKey { key: "DimSize" })?;
    if dims.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
        return Err(Error::MalformedHeader {
            key: "DimSize".into(),
            reason: format!("dimensions must be positive integers, got {dims:?}"),
        });
    }
    let size = dims.map(|d| d as usize);
    let elem = ElementType::parse(header.require("ElementType")?)?;
    if let Some(ch) = header.get("ElementNumberOfChannels") {
        if ch != "1" {
            return Err(Error::UnsupportedHeaderValue {
                key: "ElementNumberOfChannels",
                value: ch.to_string(),
            });
        }
    }
    if header.bool_flag("CompressedData")? == Some(true) {
        return Err(Error::UnsupportedHeaderValue {
            key: "CompressedData",
            value: "True".into(),
        });
    }
    let spacing = match header.floats::<3>("ElementSpacing")? {
        Some(s) => s,
        None => header.floats::<3>("ElementSize")?.unwrap_or([1.0; 3]),
    };
    let origin = match header.floats::<3>("Offset")? {
        Some(o) => o,
        None => match header.floats::<3>("Origin")? {
            Some(o) => o,
            None => header.floats::<3>("Position")?.unwrap_or([0.0; 3]),
        },
    };
    let msb = match header.bool_flag("BinaryDataByteOrderMSB")? {
        Some(b) => b,
        None => header.bool_flag("ElementByteOrderMSB")?.unwrap_or(false),
    };

    let data_file = header.require("ElementDataFile")?;
    let count = size[0] * size[1] * size[2];
    let nbytes = count * elem.width();
    let raw: Vec<u8>;
    let data: &[u8] = if data_file.eq_ignore_ascii_case("LOCAL") {
        &bytes[header.local_data_offset..]
    } else {
        let data_path = path.parent().map_or_else(|| PathBuf::from(data_file), |p| p.join(data_file));
        raw = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        &raw
    };
    if data.len() < nbytes {
        return Err(Error::MalformedHeader {
            key: "ElementDataFile".into(),
            reason: format!("expected {nbytes} bytes of voxel data, found {}", data.len()),
        });
    }
    // Some writers append padding; take the trailing block.
    let data = &data[data.len() - nbytes..];
    let voxels = decode(data, elem, msb)?;

    let series = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Volume::new(series, size, spacing, origin, voxels)
}

fn decode(data: &[u8], elem: ElementType, msb: bool) -> Result<Vec<i16>> {
    let w = elem.width();
    let to_i16 = |v: i64| {
        i16::try_from(v).map_err(|_| Error::UnsupportedHeaderValue {
            key: "ElementType",
            value: format!("voxel value {v} does not fit a 16-bit HU grid"),
        })
    };
    data.chunks_exact(w)
        .map(|c| {
            let v: i64 = match (elem, msb) {
                (ElementType::I8, _) => c[0] as i8 as i64,
                (ElementType::U8, _) => c[0] as i64,
                (ElementType::I16, false) => i16::from_le_bytes([c[0], c[1]]) as i64,
                (ElementType::I16, true) => i16::from_be_bytes([c[0], c[1]]) as i64,
                (ElementType::U16, false) => u16::from_le_bytes([c[0], c[1]]) as i64,
                (ElementType::U16, true) => u16::from_be_bytes([c[0], c[1]]) as i64,
                (ElementType::I32, false) => i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64,
                (ElementType::I32, true) => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as i64,
                (ElementType::U32, false) => u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64,
                (ElementType::U32, true) => u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as i64,
            };
            to_i16(v)
        })
        .collect()
}

/// Writes `<dir>/<series_id>.mhd` and `<dir>/<series_id>.raw` (MET_SHORT,
/// little endian). Returns the header path.
pub fn save_volume(volume: &Volume, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let id = volume.series_id();
    let header_path = dir.join(format!("{id}.mhd"));
    let raw_name = format!("{id}.raw");
    let raw_path = dir.join(&raw_name);

    let [nx, ny, nz] = volume.size();
    let [sx, sy, sz] = volume.spacing_mm();
    let [ox, oy, oz] = volume.origin_mm();
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         TransformMatrix = 1 0 0 0 1 0 0 0 1\n\
         Offset = {ox} {oy} {oz}\n\
         CenterOfRotation = 0 0 0\n\
         AnatomicalOrientation = RAI\n\
         ElementSpacing = {sx} {sy} {sz}\n\
         DimSize = {nx} {ny} {nz}\n\
         ElementType = MET_SHORT\n\
         ElementDataFile = {raw_name}\n"
    );
    let mut raw = Vec::with_capacity(volume.voxels().len() * 2);
    for v in volume.voxels() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    f.write_all(&raw).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;
    Ok(header_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let size = [8, 8, 4];
        let voxels = (0..256).map(|i| (i * 37 % 3000 - 1500) as i16).collect();
        Volume::new("vol", size, [0.7, 0.7, 2.5], [-100.25, -99.5, -50.0], voxels).unwrap()
    }

    #[test]
    fn write_then_read_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        let p = save_volume(&v, dir.path()).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.spacing_mm(), [0.7, 0.7, 2.5]);
        assert_eq!(back.slice_thickness_mm(), 2.5);
    }

    fn write_header(dir: &Path, name: &str, text: &str, raw: &[u8]) -> PathBuf {
        let p = dir.join(format!("{name}.mhd"));
        fs::write(&p, text).unwrap();
        fs::write(dir.join(format!("{name}.raw")), raw).unwrap();
        p
    }

    #[test]
    fn big_endian_and_unsigned() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<u8> = [1i16, -2].iter().flat_map(|v| v.to_be_bytes()).collect();
        let p = write_header(
            dir.path(),
            "be",
            "NDims = 3\nDimSize = 2 1 1\nElementType = MET_SHORT\nElementByteOrderMSB = True\nElementDataFile = be.raw\n",
            &raw,
        );
        assert_eq!(load_volume(&p).unwrap().voxels(), &[1, -2]);

        let p = write_header(
            dir.path(),
            "u8",
            "NDims = 3\nDimSize = 2 1 1\nElementType = MET_UCHAR\nElementSpacing = 1 1 3.0\nElementDataFile = u8.raw\n",
            &[7, 200],
        );
        let v = load_volume(&p).unwrap();
        assert_eq!(v.voxels(), &[7, 200]);
        assert_eq!(v.slice_thickness_mm(), 3.0);
    }

    #[test]
    fn local_data_after_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"NDims = 3\nDimSize = 1 1 2\nElementType = MET_SHORT\nElementDataFile = LOCAL\n".to_vec();
        bytes.extend_from_slice(&(-1000i16).to_le_bytes());
        bytes.extend_from_slice(&(40i16).to_le_bytes());
        let p = dir.path().join("one.mha");
        fs::write(&p, bytes).unwrap();
        assert_eq!(load_volume(&p).unwrap().voxels(), &[-1000, 40]);
    }

    #[test]
    fn errors_name_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_volume(dir.path().join("nope.mhd")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));

        let p = write_header(dir.path(), "a", "NDims = 3\nElementType = MET_SHORT\nElementDataFile = a.raw\n", &[]);
        assert!(matches!(load_volume(&p).unwrap_err(), Error::MissingHeaderKey { key: "DimSize" }));

        let p = write_header(
            dir.path(),
            "b",
            "NDims = 3\nDimSize = 1 1 1\nElementType = MET_FLOAT\nElementDataFile = b.raw\n",
            &[0; 4],
        );
        assert!(matches!(
            load_volume(&p).unwrap_err(),
            Error::UnsupportedHeaderValue { key: "ElementType", .. }
        ));

        let p = write_header(
            dir.path(),
            "c",
            "NDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 x 1\nElementType = MET_SHORT\nElementDataFile = c.raw\n",
            &[0; 2],
        );
        match load_volume(&p).unwrap_err() {
            Error::MalformedHeader { key, .. } => assert_eq!(key, "ElementSpacing"),
            e => panic!("unexpected {e}"),
        }

        let p = write_header(
            dir.path(),
            "d",
            "NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = d.raw\n",
            &[0; 4],
        );
        match load_volume(&p).unwrap_err() {
            Error::MalformedHeader { key, .. } => assert_eq!(key, "ElementDataFile"),
            e => panic!("unexpected {e}"),
        }
    }
}

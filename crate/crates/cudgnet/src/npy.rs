//! Minimal NPY (NumPy array file) reader/writer for the dtypes the CIFAR-10-C
//! release uses: `|u1` image stacks and `<i8` label vectors. Version 1.0
//! headers, C order only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NpyData {
    U8(Vec<u8>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Header {
    shape: Vec<usize>,
    descr: String,
    data_offset: u64,
}

fn parse_header(path: &Path) -> Result<(BufReader<File>, Header)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic[0..6] != b"\x93NUMPY" {
        return Err(Error::Dataset(format!(
            "{} is not an NPY file",
            path.display()
        )));
    }
    let (major, _minor) = (magic[6], magic[7]);
    let header_len = match major {
        1 => {
            let mut b = [0u8; 2];
            reader.read_exact(&mut b)?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            reader.read_exact(&mut b)?;
            u32::from_le_bytes(b) as usize
        }
        v => {
            return Err(Error::Dataset(format!("unsupported NPY version {v}")));
        }
    };
    let mut header = vec![0u8; header_len];
    reader.read_exact(&mut header)?;
    let text = String::from_utf8_lossy(&header).to_string();

    let descr = extract_str_field(&text, "descr").ok_or_else(|| {
        Error::Dataset(format!("{}: NPY header missing descr", path.display()))
    })?;
    if text.contains("'fortran_order': True") {
        return Err(Error::Dataset(format!(
            "{}: fortran-order NPY not supported",
            path.display()
        )));
    }
    let shape = extract_shape(&text).ok_or_else(|| {
        Error::Dataset(format!("{}: NPY header missing shape", path.display()))
    })?;
    let data_offset = (8 + if major == 1 { 2 } else { 4 } + header_len) as u64;
    Ok((
        reader,
        Header {
            shape,
            descr,
            data_offset,
        },
    ))
}

fn extract_str_field(header: &str, key: &str) -> Option<String> {
    let pat = format!("'{key}':");
    let start = header.find(&pat)? + pat.len();
    let rest = &header[start..];
    let q1 = rest.find('\'')? + 1;
    let q2 = rest[q1..].find('\'')? + q1;
    Some(rest[q1..q2].to_string())
}

fn extract_shape(header: &str) -> Option<Vec<usize>> {
    let pat = "'shape':";
    let start = header.find(pat)? + pat.len();
    let rest = &header[start..];
    let open = rest.find('(')? + 1;
    let close = rest[open..].find(')')? + open;
    let inner = &rest[open..close];
    let mut shape = Vec::new();
    for tok in inner.split(',') {
        let t = tok.trim();
        if t.is_empty() {
            continue;
        }
        shape.push(t.parse::<usize>().ok()?);
    }
    Some(shape)
}

fn item_size(descr: &str) -> Result<usize> {
    match descr {
        "|u1" | "|i1" => Ok(1),
        "<i8" | "<u8" | "<f8" => Ok(8),
        "<i4" | "<u4" | "<f4" => Ok(4),
        other => Err(Error::Dataset(format!("unsupported NPY dtype {other}"))),
    }
}

/// Read a whole NPY array.
pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let rows = None;
    read_npy_range(path, rows)
}

/// Read an NPY array, optionally restricted to a contiguous row range along
/// the first axis (seeking past the rest; CIFAR-10-C severities live in row
/// blocks of 10k).
pub fn read_npy_range(path: &Path, rows: Option<(usize, usize)>) -> Result<NpyArray> {
    let (mut reader, header) = parse_header(path)?;
    let isize_ = item_size(&header.descr)?;
    let row_elems: usize = header.shape.iter().skip(1).product::<usize>().max(1);
    let total_rows = *header.shape.first().unwrap_or(&1);
    let (r0, r1) = rows.unwrap_or((0, total_rows));
    if r1 > total_rows || r0 > r1 {
        return Err(Error::Dataset(format!(
            "{}: row range {r0}..{r1} out of bounds ({total_rows} rows)",
            path.display()
        )));
    }
    reader.seek(SeekFrom::Start(
        header.data_offset + (r0 * row_elems * isize_) as u64,
    ))?;
    let n_elems = (r1 - r0) * row_elems;
    let mut raw = vec![0u8; n_elems * isize_];
    reader.read_exact(&mut raw)?;

    let mut shape = header.shape.clone();
    if !shape.is_empty() {
        shape[0] = r1 - r0;
    }
    let data = match header.descr.as_str() {
        "|u1" => NpyData::U8(raw),
        "|i1" => NpyData::U8(raw),
        "<i8" => NpyData::I64(
            raw.chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        "<i4" => NpyData::I64(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64)
                .collect(),
        ),
        "<f4" => NpyData::I64(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as i64)
                .collect(),
        ),
        "<f8" => NpyData::I64(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as i64)
                .collect(),
        ),
        other => return Err(Error::Dataset(format!("unsupported NPY dtype {other}"))),
    };
    Ok(NpyArray { shape, data })
}

fn write_header(w: &mut impl Write, descr: &str, shape: &[usize]) -> Result<()> {
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}"
    );
    // pad so that data starts on a 64-byte boundary, newline-terminated
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');
    w.write_all(b"\x93NUMPY\x01\x00")?;
    w.write_all(&(dict.len() as u16).to_le_bytes())?;
    w.write_all(dict.as_bytes())?;
    Ok(())
}

pub fn write_npy_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, "|u1", shape)?;
    w.write_all(data)?;
    Ok(())
}

pub fn write_npy_i64(path: &Path, shape: &[usize], data: &[i64]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, "<i8", shape)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_roundtrip_with_row_slicing() {
        let dir = std::env::temp_dir().join(format!("npy_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.npy");
        let data: Vec<u8> = (0..24).collect();
        write_npy_u8(&path, &[4, 3, 2], &data).unwrap();

        let full = read_npy(&path).unwrap();
        assert_eq!(full.shape, vec![4, 3, 2]);
        assert_eq!(full.data, NpyData::U8(data.clone()));

        let part = read_npy_range(&path, Some((1, 3))).unwrap();
        assert_eq!(part.shape, vec![2, 3, 2]);
        assert_eq!(part.data, NpyData::U8(data[6..18].to_vec()));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn i64_roundtrip() {
        let dir = std::env::temp_dir().join(format!("npy_test_i64_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("l.npy");
        let data: Vec<i64> = vec![9, -3, 7, 0];
        write_npy_i64(&path, &[4], &data).unwrap();
        let back = read_npy(&path).unwrap();
        assert_eq!(back.shape, vec![4]);
        assert_eq!(back.data, NpyData::I64(data));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_non_npy() {
        let dir = std::env::temp_dir().join(format!("npy_test_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.npy");
        std::fs::write(&path, b"not an npy").unwrap();
        assert!(read_npy(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named `f32` tensor dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CSAE" | version u32 | record count u64
//! per record:
//!   name length u32 | name (UTF-8) | rank u32 | dims u64 × rank
//!   payload f32 × product(dims) | crc32 u32
//! ```
//!
//! The checksum covers everything in the record before it.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use csae_core::Tensor;

use crate::atomic::write_atomic;
use crate::error::{Result, WorkbenchError};

pub const DUMP_MAGIC: &[u8; 4] = b"CSAE";
pub const DUMP_VERSION: u32 = 1;
const MAX_RANK: u64 = 8;
const MAX_NAME: u32 = 4096;

/// Writes records one at a time; the count is fixed up front.
pub struct DumpWriter<W: Write> {
    out: W,
    declared: u64,
    written: u64,
    names: BTreeSet<String>,
}

impl<W: Write> DumpWriter<W> {
    pub fn new(mut out: W, records: u64) -> Result<Self> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&DUMP_VERSION.to_le_bytes())?;
        out.write_all(&records.to_le_bytes())?;
        Ok(Self {
            out,
            declared: records,
            written: 0,
            names: BTreeSet::new(),
        })
    }

    pub fn write(&mut self, name: &str, tensor: &Tensor<f32>) -> Result<()> {
        if self.written == self.declared {
            return Err(WorkbenchError::Malformed {
                what: "dump",
                detail: format!("more than the declared {} records", self.declared),
            });
        }
        if !self.names.insert(name.to_owned()) {
            return Err(WorkbenchError::DuplicateName(name.to_owned()));
        }
        let mut head = Vec::with_capacity(16 + name.len() + 8 * tensor.rank());
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            head.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let payload: Vec<u8> = tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut crc = crc32fast::Hasher::new();
        crc.update(&head);
        crc.update(&payload);
        self.out.write_all(&head)?;
        self.out.write_all(&payload)?;
        self.out.write_all(&crc.finalize().to_le_bytes())?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.declared {
            return Err(WorkbenchError::Malformed {
                what: "dump",
                detail: format!("declared {} records, wrote {}", self.declared, self.written),
            });
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streaming reader: holds at most one record payload at a time.
pub struct DumpReader<R: Read> {
    input: R,
    version: u32,
    count: u64,
    next: u64,
    names: BTreeSet<String>,
    failed: bool,
}

/// Read exactly `buf.len()` bytes or report how many were available.
fn fill(input: &mut impl Read, buf: &mut [u8], context: impl FnOnce() -> String) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match input.read(&mut buf[got..]) {
            Ok(0) => {
                return Err(WorkbenchError::Truncated {
                    context: context(),
                    expected: buf.len() as u64,
                    actual: got as u64,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

impl<R: Read> DumpReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match input.read(&mut magic[got..])? {
                0 => break,
                n => got += n,
            }
        }
        if magic[..got] != DUMP_MAGIC[..got] || got == 0 {
            return Err(WorkbenchError::BadMagic {
                expected: "tensor dump",
                found: magic[..got].to_vec(),
            });
        }
        if got < 4 {
            return Err(WorkbenchError::Truncated {
                context: "file header".into(),
                expected: 4,
                actual: got as u64,
            });
        }
        let mut head = [0u8; 12];
        fill(&mut input, &mut head, || "file header".into())?;
        let version = u32::from_le_bytes(head[..4].try_into().unwrap());
        if version > DUMP_VERSION || version == 0 {
            return Err(WorkbenchError::UnsupportedVersion {
                found: version,
                supported: DUMP_VERSION,
            });
        }
        Ok(Self {
            input,
            version,
            count: u64::from_le_bytes(head[4..].try_into().unwrap()),
            next: 0,
            names: BTreeSet::new(),
            failed: false,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn record_count(&self) -> u64 {
        self.count
    }

    /// Next `(name, tensor)`, or `None` after the last record.
    pub fn next_record(&mut self) -> Result<Option<(String, Tensor<f32>)>> {
        if self.next == self.count {
            let mut probe = [0u8; 1];
            let extra = self.input.read(&mut probe)?;
            if extra > 0 {
                let rest = std::io::copy(&mut self.input, &mut std::io::sink())?;
                return Err(WorkbenchError::TrailingData(rest + extra as u64));
            }
            return Ok(None);
        }
        let index = self.next;
        let mut crc = crc32fast::Hasher::new();
        let header = |what: &str| format!("record #{index} {what}");

        let mut b4 = [0u8; 4];
        fill(&mut self.input, &mut b4, || header("name length"))?;
        crc.update(&b4);
        let name_len = u32::from_le_bytes(b4);
        if name_len > MAX_NAME {
            return Err(WorkbenchError::Malformed {
                what: "dump",
                detail: format!("record #{index} declares a {name_len}-byte name"),
            });
        }
        let mut name = vec![0u8; name_len as usize];
        fill(&mut self.input, &mut name, || header("name"))?;
        crc.update(&name);
        let name = String::from_utf8(name).map_err(|_| WorkbenchError::BadName { index })?;

        fill(&mut self.input, &mut b4, || format!("record `{name}` rank"))?;
        crc.update(&b4);
        let rank = u32::from_le_bytes(b4) as u64;
        if rank > MAX_RANK {
            return Err(WorkbenchError::BadDims { name, rank, dims: vec![] });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let mut b8 = [0u8; 8];
            fill(&mut self.input, &mut b8, || format!("record `{name}` dims"))?;
            crc.update(&b8);
            dims.push(u64::from_le_bytes(b8));
        }
        let bytes = dims
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d))
            .filter(|&b| b <= isize::MAX as u64);
        let Some(bytes) = bytes else {
            return Err(WorkbenchError::BadDims { name, rank, dims });
        };

        // grow with the data actually present so a corrupt length cannot
        // force a huge allocation
        let mut payload = Vec::with_capacity(bytes.min(1 << 20) as usize);
        let got = (&mut self.input).take(bytes).read_to_end(&mut payload)? as u64;
        if got < bytes {
            return Err(WorkbenchError::Truncated {
                context: format!("record `{name}` payload"),
                expected: bytes,
                actual: got,
            });
        }
        crc.update(&payload);
        fill(&mut self.input, &mut b4, || format!("record `{name}` checksum"))?;
        if u32::from_le_bytes(b4) != crc.finalize() {
            return Err(WorkbenchError::Checksum(format!("record `{name}`")));
        }
        if !self.names.insert(name.clone()) {
            return Err(WorkbenchError::DuplicateName(name));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        self.next += 1;
        Ok(Some((name, Tensor::new(&shape, values)?)))
    }
}

impl<R: Read> Iterator for DumpReader<R> {
    type Item = Result<(String, Tensor<f32>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let r = self.next_record();
        self.failed = r.is_err();
        r.transpose()
    }
}

pub fn encode_dump(records: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut w = DumpWriter::new(Vec::new(), records.len() as u64)?;
    for (name, t) in records {
        w.write(name, t)?;
    }
    w.finish()
}

pub fn decode_dump(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    DumpReader::new(bytes)?.collect()
}

pub fn write_dump(path: &Path, records: &[(&str, &Tensor<f32>)]) -> Result<()> {
    write_atomic(path, |f| {
        let mut w = DumpWriter::new(BufWriter::new(f), records.len() as u64)?;
        for (name, t) in records {
            w.write(name, t)?;
        }
        w.finish()?.into_inner().map_err(|e| e.into_error())?;
        Ok(())
    })
}

pub fn open_dump(path: &Path) -> Result<DumpReader<BufReader<File>>> {
    let f = File::open(path).map_err(WorkbenchError::io(path))?;
    DumpReader::new(BufReader::new(f))
}

pub fn read_dump(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    open_dump(path)?.collect()
}

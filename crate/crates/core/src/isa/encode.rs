//! Binary program format.
//!
//! ```text
//! "VTOP" | version u16 | reserved u16
//! io:       u8 present [str input | u32 c h w | str output | u64 len]
//! memory:   u32 n { str name | u64 base | u64 len | u8 frac }
//! bundles:  u16 n { u8 id | str name | u8 role | u8 vis | u16 m { u8 op | u8 k | u8 reg * k } }
//! program:  u32 n { u8 0 | u8 reg | u64 value } or { u8 1 | u8 bundle }
//! stream:   u32 n { str name | u64 len }
//! ```
//!
//! All integers little-endian; strings are a u16 byte length followed by UTF-8.

use std::io::Write;

use byteorder::{LittleEndian, WriteBytesExt};
use thiserror::Error;

use super::{
    BundleProgram, BundleRole, BundleTableEntry, ComponentInvocation, ComponentOp, Instruction, MemoryRegion,
    ProgramIo, StreamTensor, Visibility,
};
use crate::tensor::Dims3;

pub const MAGIC: &[u8; 4] = b"VTOP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("decode error at byte {offset}: {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeErrorKind {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("unexpected end of input")]
    Truncated,
    #[error("invalid {what} tag {tag}")]
    BadTag { what: &'static str, tag: u8 },
    #[error("count {0} exceeds remaining input")]
    BadCount(u64),
    #[error("string is not UTF-8")]
    Utf8,
    #[error("zero dimension")]
    BadDims,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

pub fn encode(program: &BundleProgram) -> Vec<u8> {
    let mut out = Vec::new();
    write_program(&mut out, program).expect("writing to a Vec cannot fail");
    out
}

fn write_str(w: &mut Vec<u8>, s: &str) -> std::io::Result<()> {
    w.write_u16::<LittleEndian>(s.len() as u16)?;
    w.write_all(s.as_bytes())
}

fn role_code(role: BundleRole) -> u8 {
    BundleRole::ALL.iter().position(|&r| r == role).unwrap() as u8
}

fn write_program(w: &mut Vec<u8>, p: &BundleProgram) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u16::<LittleEndian>(0)?;

    match &p.io {
        None => w.write_u8(0)?,
        Some(io) => {
            w.write_u8(1)?;
            write_str(w, &io.input_region)?;
            for d in [io.input_dims.c, io.input_dims.h, io.input_dims.w] {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            write_str(w, &io.output_region)?;
            w.write_u64::<LittleEndian>(io.output_len as u64)?;
        }
    }

    w.write_u32::<LittleEndian>(p.memory.len() as u32)?;
    for r in &p.memory {
        write_str(w, &r.name)?;
        w.write_u64::<LittleEndian>(r.base as u64)?;
        w.write_u64::<LittleEndian>(r.len as u64)?;
        w.write_u8(r.frac_bits)?;
    }

    w.write_u16::<LittleEndian>(p.bundles.len() as u16)?;
    for b in &p.bundles {
        w.write_u8(b.id)?;
        write_str(w, &b.name)?;
        w.write_u8(role_code(b.role))?;
        w.write_u8(match b.visibility {
            Visibility::Public => 0,
            Visibility::Private => 1,
        })?;
        w.write_u16::<LittleEndian>(b.components.len() as u16)?;
        for c in &b.components {
            w.write_u8(c.op.code())?;
            w.write_u8(c.bindings.len() as u8)?;
            w.write_all(&c.bindings)?;
        }
    }

    w.write_u32::<LittleEndian>(p.instructions.len() as u32)?;
    for i in &p.instructions {
        match *i {
            Instruction::ParamSet { reg, value } => {
                w.write_u8(0)?;
                w.write_u8(reg)?;
                w.write_u64::<LittleEndian>(value)?;
            }
            Instruction::ModuleExec { bundle } => {
                w.write_u8(1)?;
                w.write_u8(bundle)?;
            }
        }
    }

    w.write_u32::<LittleEndian>(p.stream.len() as u32)?;
    for t in &p.stream {
        write_str(w, &t.name)?;
        w.write_u64::<LittleEndian>(t.len as u64)?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError { offset: self.pos, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(DecodeErrorKind::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, DecodeError> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| DecodeError {
            offset: at,
            kind: DecodeErrorKind::BadCount(v),
        })
    }

    fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError {
            offset: at,
            kind: DecodeErrorKind::Utf8,
        })
    }

    /// Element count, rejected up front if the remaining input cannot hold
    /// `count` records of at least `min_size` bytes.
    fn count(&mut self, count: u64, min_size: usize) -> Result<usize, DecodeError> {
        let remaining = (self.buf.len() - self.pos) as u64;
        if count.saturating_mul(min_size as u64) > remaining {
            return Err(self.err(DecodeErrorKind::BadCount(count)));
        }
        Ok(count as usize)
    }

    fn tag<T>(&mut self, what: &'static str, f: impl FnOnce(u8) -> Option<T>) -> Result<T, DecodeError> {
        let at = self.pos;
        let tag = self.u8()?;
        f(tag).ok_or(DecodeError {
            offset: at,
            kind: DecodeErrorKind::BadTag { what, tag },
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<BundleProgram, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| r.err(DecodeErrorKind::BadMagic))? != MAGIC {
        return Err(DecodeError {
            offset: 0,
            kind: DecodeErrorKind::BadMagic,
        });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DecodeError {
            offset: 4,
            kind: DecodeErrorKind::BadVersion(version),
        });
    }
    r.u16()?;

    let io = match r.tag("io", |t| (t <= 1).then_some(t))? {
        0 => None,
        _ => {
            let input_region = r.str()?;
            let at = r.pos;
            let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let input_dims = Dims3::new(c, h, w).map_err(|_| DecodeError {
                offset: at,
                kind: DecodeErrorKind::BadDims,
            })?;
            Some(ProgramIo {
                input_region,
                input_dims,
                output_region: r.str()?,
                output_len: r.usize()?,
            })
        }
    };

    let n = r.u32()?;
    let n = r.count(n as u64, 19)?;
    let mut memory = Vec::with_capacity(n);
    for _ in 0..n {
        memory.push(MemoryRegion {
            name: r.str()?,
            base: r.usize()?,
            len: r.usize()?,
            frac_bits: r.u8()?,
        });
    }

    let n = r.u16()?;
    let n = r.count(n as u64, 7)?;
    let mut bundles = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u8()?;
        let name = r.str()?;
        let role = r.tag("bundle role", |t| BundleRole::ALL.get(t as usize).copied())?;
        let visibility = r.tag("visibility", |t| match t {
            0 => Some(Visibility::Public),
            1 => Some(Visibility::Private),
            _ => None,
        })?;
        let m = r.u16()?;
        let m = r.count(m as u64, 2)?;
        let mut components = Vec::with_capacity(m);
        for _ in 0..m {
            let op = r.tag("component op", ComponentOp::from_code)?;
            let k = r.u8()? as usize;
            components.push(ComponentInvocation::new(op, r.take(k)?.to_vec()));
        }
        bundles.push(BundleTableEntry {
            id,
            name,
            role,
            visibility,
            components,
        });
    }

    let n = r.u32()?;
    let n = r.count(n as u64, 2)?;
    let mut instructions = Vec::with_capacity(n);
    for _ in 0..n {
        let tag = r.tag("instruction", |t| (t <= 1).then_some(t))?;
        instructions.push(if tag == 0 {
            Instruction::ParamSet {
                reg: r.u8()?,
                value: r.u64()?,
            }
        } else {
            Instruction::ModuleExec { bundle: r.u8()? }
        });
    }

    let n = r.u32()?;
    let n = r.count(n as u64, 10)?;
    let mut stream = Vec::with_capacity(n);
    for _ in 0..n {
        stream.push(StreamTensor {
            name: r.str()?,
            len: r.usize()?,
        });
    }

    if r.pos != bytes.len() {
        return Err(r.err(DecodeErrorKind::Trailing(bytes.len() - r.pos)));
    }
    Ok(BundleProgram {
        io,
        memory,
        bundles,
        instructions,
        stream,
    })
}

//! Little-endian framing shared by the binary formats:
//! `magic[5] | body_len: u64 | body | fnv1a64(everything before): u64`.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatErrorKind, Result};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) const MAGIC_LEN: usize = 5;
const PREFIX_LEN: usize = MAGIC_LEN + 8;
const CHECKSUM_LEN: usize = 8;

pub(crate) struct Writer {
    magic: [u8; MAGIC_LEN],
    body: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; MAGIC_LEN]) -> Self {
        Writer {
            magic: *magic,
            body: Vec::new(),
        }
    }

    pub fn u8(&mut self, x: u8) {
        self.body.push(x);
    }

    pub fn u32(&mut self, x: usize) -> Result<()> {
        let v = u32::try_from(x)
            .map_err(|_| Error::Contract(format!("{x} does not fit in 32 bits")))?;
        self.body.write_u32::<LE>(v).expect("vec write");
        Ok(())
    }

    pub fn u64(&mut self, x: u64) {
        self.body.write_u64::<LE>(x).expect("vec write");
    }

    pub fn f32s(&mut self, xs: &[f32]) {
        self.body.reserve(xs.len() * 4);
        for &x in xs {
            self.body.write_f32::<LE>(x).expect("vec write");
        }
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.body.write_f64::<LE>(x).expect("vec write");
        }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.body.extend_from_slice(b);
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PREFIX_LEN + self.body.len() + CHECKSUM_LEN);
        out.extend_from_slice(&self.magic);
        out.write_u64::<LE>(self.body.len() as u64)
            .expect("vec write");
        out.extend_from_slice(&self.body);
        let sum = fnv1a64(&out);
        out.write_u64::<LE>(sum).expect("vec write");
        out
    }
}

fn truncated(what: &str) -> Error {
    Error::format(FormatErrorKind::Truncated, format!("{what} ends early"))
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::format(FormatErrorKind::Shape, msg)
}

/// Cursor over a verified body.
pub(crate) struct Reader<'a> {
    what: &'static str,
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    /// Checks, in order: magic, declared length against the file length,
    /// checksum. Only then is the body handed out.
    pub fn open(bytes: &'a [u8], magic: &[u8; MAGIC_LEN], what: &'static str) -> Result<Self> {
        if bytes.len() < MAGIC_LEN || &bytes[..MAGIC_LEN] != magic {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(MAGIC_LEN)]).into_owned();
            return Err(Error::format(
                FormatErrorKind::BadMagic,
                format!("not a {what} file (magic {found:?})"),
            ));
        }
        if bytes.len() < PREFIX_LEN {
            return Err(truncated(what));
        }
        let declared =
            u64::from_le_bytes(bytes[MAGIC_LEN..PREFIX_LEN].try_into().expect("8 bytes"));
        let need = usize::try_from(declared)
            .ok()
            .and_then(|n| n.checked_add(PREFIX_LEN + CHECKSUM_LEN))
            .ok_or_else(|| truncated(what))?;
        if bytes.len() < need {
            return Err(truncated(what));
        }
        if bytes.len() > need {
            return Err(shape(format!(
                "{} unexpected trailing bytes after {what}",
                bytes.len() - need
            )));
        }
        let split = need - CHECKSUM_LEN;
        let stored = u64::from_le_bytes(bytes[split..].try_into().expect("8 bytes"));
        let actual = fnv1a64(&bytes[..split]);
        if stored != actual {
            return Err(Error::format(
                FormatErrorKind::Checksum,
                format!("{what} checksum mismatch (stored {stored:016x}, computed {actual:016x})"),
            ));
        }
        Ok(Reader {
            what,
            cur: Cursor::new(&bytes[PREFIX_LEN..split]),
        })
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn need(&self, n_bytes: Option<usize>) -> Result<()> {
        match n_bytes {
            Some(n) if n <= self.remaining() => Ok(()),
            _ => Err(shape(format!(
                "{} header promises more data than it holds",
                self.what
            ))),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.need(Some(1))?;
        Ok(self.cur.read_u8().expect("length checked"))
    }

    pub fn u32(&mut self) -> Result<usize> {
        self.need(Some(4))?;
        Ok(self.cur.read_u32::<LE>().expect("length checked") as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.need(Some(8))?;
        Ok(self.cur.read_u64::<LE>().expect("length checked"))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        self.need(n.checked_mul(4))?;
        let mut out = vec![0.0f32; n];
        self.cur
            .read_f32_into::<LE>(&mut out)
            .expect("length checked");
        Ok(out)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.need(n.checked_mul(8))?;
        let mut out = vec![0.0f64; n];
        self.cur
            .read_f64_into::<LE>(&mut out)
            .expect("length checked");
        Ok(out)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()?;
        self.need(Some(n))?;
        let mut out = vec![0u8; n];
        self.cur.read_exact(&mut out).expect("length checked");
        Ok(out)
    }

    /// The body must be fully consumed.
    pub fn done(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(shape(format!(
                "{n} unread bytes at the end of the {} body",
                self.what
            ))),
        }
    }
}

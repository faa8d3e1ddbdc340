//! Binary feature-bundle files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SFDR"                      magic, 4 bytes
//! u32 version                 currently 1
//! u32 d_v, d_t, H, d_g, k, d_r  corpus header
//! record*                     until end of file
//!
//! record:
//!   u32 len, [u8; len]        image id, UTF-8
//!   u8 flags                  bit 0: clip_text present
//!   f32[d_v]                  CLIP visual
//!   f32[d_t]                  CLIP text (only if flag bit 0)
//!   f32[H * d_g]              grid features, row-major
//!   f32[k * d_r]              ROI features, row-major
//!   u16 count                 captions
//!   (u32 len, [u8; len])*     captions, UTF-8
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFDR";
pub const VERSION: u32 = 1;
const FLAG_HAS_TEXT: u8 = 1;

/// Feature dimensions shared by every bundle of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusHeader {
    pub d_v: usize,
    pub d_t: usize,
    pub h: usize,
    pub d_g: usize,
    pub k: usize,
    pub d_r: usize,
}

impl CorpusHeader {
    /// Named dimensions in on-disk order.
    pub fn fields(&self) -> [(&'static str, usize); 6] {
        [
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("H", self.h),
            ("d_g", self.d_g),
            ("k", self.k),
            ("d_r", self.d_r),
        ]
    }
}

/// One image's pre-extracted features plus its reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub image_id: String,
    pub clip_visual: Tensor,
    /// Absent for image-only inputs.
    pub clip_text: Option<Tensor>,
    pub grid: Tensor,
    pub roi: Tensor,
    pub captions: Vec<String>,
}

impl FeatureBundle {
    /// Header implied by this bundle's arrays. `d_t` is 0 when text is absent.
    pub fn header(&self) -> CorpusHeader {
        CorpusHeader {
            d_v: self.clip_visual.cols(),
            d_t: self.clip_text.as_ref().map_or(0, |t| t.cols()),
            h: self.grid.rows(),
            d_g: self.grid.cols(),
            k: self.roi.rows(),
            d_r: self.roi.cols(),
        }
    }

    /// Checks shapes against `header` and that every value is finite.
    pub fn validate(&self, header: &CorpusHeader) -> Result<()> {
        let mut checks = vec![
            ("clip_visual", self.clip_visual.shape(), (1, header.d_v)),
            ("grid", self.grid.shape(), (header.h, header.d_g)),
            ("roi", self.roi.shape(), (header.k, header.d_r)),
        ];
        if let Some(t) = &self.clip_text {
            checks.push(("clip_text", t.shape(), (1, header.d_t)));
        }
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Dimension {
                    op: name,
                    lhs: got,
                    rhs: want,
                });
            }
        }
        let tensors = [Some(&self.clip_visual), self.clip_text.as_ref(), Some(&self.grid), Some(&self.roi)];
        if tensors.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("feature bundle"));
        }
        Ok(())
    }
}

/// Serialises header plus records. Feature values are stored as `f32`.
pub fn encode_bundles(header: &CorpusHeader, bundles: &[FeatureBundle]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, v) in header.fields() {
        out.extend_from_slice(&u32_field(v, "header dimension")?.to_le_bytes());
    }
    for b in bundles {
        b.validate(header)?;
        put_str(&mut out, &b.image_id)?;
        out.push(if b.clip_text.is_some() { FLAG_HAS_TEXT } else { 0 });
        let arrays = [Some(&b.clip_visual), b.clip_text.as_ref(), Some(&b.grid), Some(&b.roi)];
        for t in arrays.into_iter().flatten() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let count = u16::try_from(b.captions.len())
            .map_err(|_| Error::Argument(format!("{} captions exceed u16", b.captions.len())))?;
        out.extend_from_slice(&count.to_le_bytes());
        for c in &b.captions {
            put_str(&mut out, c)?;
        }
    }
    Ok(out)
}

pub(crate) fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} exceeds u32")))
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&u32_field(s.len(), "string length")?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let start = self.offset();
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            offset: start,
            msg: format!("{what} is not valid UTF-8"),
        })
    }

    fn f32_tensor(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor> {
        let start = self.offset();
        let bytes = self.take(rows * cols * 4, what)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: start,
                msg: format!("{what} contains non-finite values"),
            });
        }
        Tensor::new(rows, cols, data)
    }

    pub(crate) fn f64_tensor(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor> {
        let bytes = self.take(rows * cols * 8, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(rows, cols, data)
    }
}

/// Parses a bundle file image. When `expected` is given, the file header
/// must match it exactly.
pub fn decode_bundles(bytes: &[u8], expected: Option<&CorpusHeader>) -> Result<(CorpusHeader, Vec<FeatureBundle>)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"SFDR\""),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32("header")? as usize;
    }
    let header = CorpusHeader {
        d_v: dims[0],
        d_t: dims[1],
        h: dims[2],
        d_g: dims[3],
        k: dims[4],
        d_r: dims[5],
    };
    if let Some(want) = expected {
        for ((name, got), (_, exp)) in header.fields().iter().zip(want.fields()) {
            if *got != exp {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!("dimension mismatch: {name} is {got}, corpus header says {exp}"),
                });
            }
        }
    }
    let mut bundles = Vec::new();
    while !r.at_end() {
        let image_id = r.string("image id")?;
        let flags = r.u8("flags")?;
        if flags & !FLAG_HAS_TEXT != 0 {
            return Err(r.error(format!("unknown flag bits {flags:#04x}")));
        }
        let clip_visual = r.f32_tensor(1, header.d_v, "clip_visual")?;
        let clip_text = if flags & FLAG_HAS_TEXT != 0 {
            Some(r.f32_tensor(1, header.d_t, "clip_text")?)
        } else {
            None
        };
        let grid = r.f32_tensor(header.h, header.d_g, "grid")?;
        let roi = r.f32_tensor(header.k, header.d_r, "roi")?;
        let count = r.u16("caption count")?;
        let captions = (0..count).map(|_| r.string("caption")).collect::<Result<Vec<_>>>()?;
        bundles.push(FeatureBundle {
            image_id,
            clip_visual,
            clip_text,
            grid,
            roi,
            captions,
        });
    }
    Ok((header, bundles))
}

pub fn write_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    write_bundle_with_header(bundle, &bundle.header(), path)
}

pub fn write_bundle_with_header(bundle: &FeatureBundle, header: &CorpusHeader, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundles(header, std::slice::from_ref(bundle))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a single-record bundle file.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    read_bundle_checked(path, None).map(|(_, b)| b)
}

/// Reads a single-record bundle file, validating against a corpus header.
pub fn read_bundle_checked(path: impl AsRef<Path>, expected: Option<&CorpusHeader>) -> Result<(CorpusHeader, FeatureBundle)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut bundles) = decode_bundles(&bytes, expected)?;
    match bundles.len() {
        1 => Ok((header, bundles.pop().unwrap())),
        n => Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("expected exactly one record, found {n}"),
        }),
    }
}

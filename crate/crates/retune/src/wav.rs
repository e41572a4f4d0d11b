//! Mono PCM16 little-endian RIFF files, the only audio format we touch.
//!
//! Quantization rule: save clamps round(x * 32768) into [-32768, 32767];
//! load divides by 32768. A saved sample therefore reloads within one LSB.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

fn parse_err(field: &str, reason: impl Into<String>) -> Error {
    Error::WavParse { field: field.to_string(), reason: reason.into() }
}

/// Encode samples (clamped to [-1, 1]) as a mono PCM16 RIFF byte vector.
pub fn encode_wav(sample_rate: u32, samples: &[f32]) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &x in samples {
        let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn save_wav(path: &Path, sample_rate: u32, samples: &[f32]) -> Result<()> {
    let bytes = encode_wav(sample_rate, samples);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Decode a mono PCM16 RIFF byte slice into (sample_rate, samples).
pub fn decode_wav(bytes: &[u8]) -> Result<(u32, Vec<f32>)> {
    let take = |off: usize, len: usize, field: &str| -> Result<&[u8]> {
        bytes
            .get(off..off + len)
            .ok_or_else(|| parse_err(field, "unexpected end of data"))
    };
    let u32_at = |off: usize, field: &str| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4, field)?.try_into().unwrap()))
    };
    let u16_at = |off: usize, field: &str| -> Result<u16> {
        Ok(u16::from_le_bytes(take(off, 2, field)?.try_into().unwrap()))
    };

    if take(0, 4, "riff magic")? != b"RIFF" {
        return Err(parse_err("riff magic", "not a RIFF file"));
    }
    let _riff_size = u32_at(4, "riff size")?;
    if take(8, 4, "wave magic")? != b"WAVE" {
        return Err(parse_err("wave magic", "RIFF form is not WAVE"));
    }

    let mut offset = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while offset < bytes.len() {
        let id: [u8; 4] = take(offset, 4, "chunk id")?.try_into().unwrap();
        let size = u32_at(offset + 4, "chunk size")? as usize;
        let body = take(offset + 8, size, "chunk body")?;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(parse_err("fmt chunk", format!("size {size} below 16")));
                }
                let format = u16_at(offset + 8, "audio format")?;
                let channels = u16_at(offset + 10, "channel count")?;
                let rate = u32_at(offset + 12, "sample rate")?;
                let bits = u16_at(offset + 22, "bits per sample")?;
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        offset += 8 + size + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| parse_err("fmt chunk", "missing"))?;
    if format != 1 {
        return Err(parse_err("audio format", format!("compressed format tag {format}, only PCM (1) supported")));
    }
    if channels != 1 {
        return Err(parse_err("channel count", format!("{channels} channels, only mono supported")));
    }
    if bits != 16 {
        return Err(parse_err("bits per sample", format!("{bits} bits, only 16 supported")));
    }
    let data = data.ok_or_else(|| parse_err("data chunk", "missing"))?;
    if data.len() % 2 != 0 {
        return Err(parse_err("data chunk", "odd byte length for 16-bit samples"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    Ok((rate, samples))
}

pub fn load_wav(path: &Path) -> Result<(u32, Vec<f32>)> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

//! Minimal RIFF/WAVE reader and writer: 16-bit integer PCM and 32-bit IEEE
//! float, interleaved channels, unknown chunks skipped on read.

use std::fs;
use std::path::Path;

use crate::error::{Result, SfcError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Int16,
    Float32,
}

#[derive(Clone, Debug)]
pub struct WavData {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f32>>,
}

fn bad(detail: impl Into<String>) -> SfcError {
    SfcError::Format { what: "wav", detail: detail.into() }
}

fn u16le(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32le(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let b = fs::read(path)?;
    if b.len() < 12 || &b[0..4] != b"RIFF" || &b[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= b.len() {
        let id = &b[pos..pos + 4];
        let size = u32le(&b, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > b.len() {
            return Err(bad(format!("chunk {:?} overruns the file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too small"));
                }
                fmt = Some((
                    u16le(&b, body_start),
                    u16le(&b, body_start + 2),
                    u32le(&b, body_start + 4),
                    u16le(&b, body_start + 14),
                ));
            }
            b"data" => data = Some(&b[body_start..body_start + size]),
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }
    let (format, n_ch, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if n_ch == 0 {
        return Err(bad("zero channels"));
    }
    let n_ch = n_ch as usize;
    let samples: Vec<f32> = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => return Err(bad(format!("unsupported encoding: format {format}, {bits} bits"))),
    };
    let frames = samples.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for (i, s) in samples.iter().take(frames * n_ch).enumerate() {
        channels[i % n_ch].push(*s);
    }
    Ok(WavData { sample_rate: rate, channels })
}

pub fn write_wav(
    path: &Path,
    sample_rate: u32,
    channels: &[Vec<f32>],
    format: SampleFormat,
) -> Result<()> {
    if channels.is_empty() {
        return Err(bad("no channels to write"));
    }
    let frames = channels[0].len();
    if channels.iter().any(|c| c.len() != frames) {
        return Err(bad("channels differ in length"));
    }
    let n_ch = channels.len() as u16;
    let (fmt_tag, bits): (u16, u16) = match format {
        SampleFormat::Int16 => (1, 16),
        SampleFormat::Float32 => (3, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_len = frames as u32 * n_ch as u32 * bytes_per_sample;
    let byte_rate = sample_rate * n_ch as u32 * bytes_per_sample;
    let block_align = n_ch * bits / 8;

    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&fmt_tag.to_le_bytes());
    out.extend_from_slice(&n_ch.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for i in 0..frames {
        for ch in channels {
            match format {
                SampleFormat::Int16 => {
                    // Same 1/32768 scale as the reader, clamped to i16 range.
                    let v = (ch[i] as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&v.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&ch[i].to_le_bytes()),
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("sfc-wav-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn float32_roundtrip_is_exact() {
        let path = tmp("f32.wav");
        let ch = vec![
            vec![0.0f32, 0.5, -0.25, 1.0, -1.0],
            vec![0.1, 0.2, 0.3, 0.4, 0.5],
        ];
        write_wav(&path, 16000, &ch, SampleFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.channels, ch);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn int16_roundtrip_is_quantized_but_close() {
        let path = tmp("i16.wav");
        let ch = vec![(0..100).map(|i| ((i as f32) * 0.31).sin() * 0.9).collect::<Vec<_>>()];
        write_wav(&path, 44100, &ch, SampleFormat::Int16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 44100);
        for (a, b) in ch[0].iter().zip(&back.channels[0]) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn garbage_is_rejected_with_a_format_error() {
        let path = tmp("garbage.wav");
        std::fs::write(&path, b"definitely not audio").unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(matches!(err, SfcError::Format { what: "wav", .. }));
        std::fs::remove_file(&path).ok();
    }
}

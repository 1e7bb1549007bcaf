//! Minimal RIFF/WAVE reader and writer for mono 16-bit PCM.
//!
//! Amplitudes map to sample words by a fixed factor of 32768, so a write
//! followed by a read reproduces 16-bit content exactly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Waveform;

const SCALE: f64 = 32768.0;

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let n = wave.len();
    let data_bytes = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&wave.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in &wave.samples {
        buf.extend_from_slice(&quantize(s).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    let bad = |detail: &str| Error::MalformedWav {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(bad("chunk extends past end of file"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too small"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if format != 1 {
        return Err(bad(&format!(
            "unsupported format tag {format}, expected PCM"
        )));
    }
    if channels != 1 {
        return Err(Error::UnsupportedChannels {
            path: path.to_path_buf(),
            channels,
        });
    }
    if bits != 16 {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            bits,
        });
    }
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(bad("odd data chunk size for 16-bit samples"));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / SCALE)
        .collect();
    if samples.is_empty() {
        return Err(bad("data chunk holds no samples"));
    }
    Waveform::new(samples, rate)
}

/// Nearest 16-bit word for an amplitude, saturating at the rails.
pub fn quantize(sample: f64) -> i16 {
    let v = (sample * SCALE).round();
    v.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Amplitude of a 16-bit word, the exact inverse of `quantize` on the grid.
pub fn dequantize(word: i16) -> f64 {
    word as f64 / SCALE
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_for_pcm_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.wav");
        // 1 s ramp at 8 kHz.
        let samples: Vec<f64> = (0..8000)
            .map(|i| dequantize((i % 4000) as i16 - 2000))
            .collect();
        let wave = Waveform::new(samples, 8000).unwrap();
        write_wav(&path, &wave).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.samples, wave.samples);

        // And the second generation of bytes is identical too.
        let path2 = dir.path().join("ramp2.wav");
        write_wav(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn full_scale_word_maps_to_expected_amplitude() {
        assert_eq!(dequantize(32767), 32767.0 / 32768.0);
        assert_eq!(quantize(32767.0 / 32768.0), 32767);
        assert_eq!(quantize(1.0), 32767); // saturates
        assert_eq!(quantize(-1.0), -32768);
    }

    #[test]
    fn stereo_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        // Hand-build a 2-channel header.
        let mut buf = Vec::new();
        buf.extend_from_slice(b"RIFF");
        buf.extend_from_slice(&40u32.to_le_bytes());
        buf.extend_from_slice(b"WAVE");
        buf.extend_from_slice(b"fmt ");
        buf.extend_from_slice(&16u32.to_le_bytes());
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&2u16.to_le_bytes()); // stereo
        buf.extend_from_slice(&8000u32.to_le_bytes());
        buf.extend_from_slice(&32000u32.to_le_bytes());
        buf.extend_from_slice(&4u16.to_le_bytes());
        buf.extend_from_slice(&16u16.to_le_bytes());
        buf.extend_from_slice(b"data");
        buf.extend_from_slice(&4u32.to_le_bytes());
        buf.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&path, buf).unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(Error::UnsupportedChannels { channels: 2, .. })
        ));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.wav");
        fs::write(&path, b"not a wav file at all").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::MalformedWav { .. })));
    }
}

//! WAV ingestion and emission: RIFF/WAVE, PCM 16-bit little-endian, mono,
//! 16 kHz. Anything else is rejected with an error naming the offending
//! field.

use std::io::Write;
use std::path::Path;

use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

fn u16le(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32le(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Parse a WAV file into a clip; samples are scaled to [-1, 1] by 1/32768.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "{}: file too short for a RIFF header",
            path.display()
        )));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::Format(format!(
            "{}: bad chunk id {:?}, expected RIFF",
            path.display(),
            &bytes[0..4]
        )));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::Format(format!(
            "{}: bad format tag {:?}, expected WAVE",
            path.display(),
            &bytes[8..12]
        )));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (codec, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32le(&bytes, off + 4) as usize;
        let body_start = off + 8;
        if body_start + size > bytes.len() {
            return Err(Error::Format(format!(
                "{}: chunk {:?} of size {size} overruns the file",
                path.display(),
                std::str::from_utf8(id).unwrap_or("?")
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format(format!(
                        "{}: fmt chunk of size {size}, expected >= 16",
                        path.display()
                    )));
                }
                fmt = Some((
                    u16le(&bytes, body_start),
                    u16le(&bytes, body_start + 2),
                    u32le(&bytes, body_start + 4),
                    u16le(&bytes, body_start + 14),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {} // skip LIST, fact, ...
        }
        // Chunks are word-aligned.
        off = body_start + size + (size & 1);
    }

    let (codec, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Format(format!("{}: missing fmt chunk", path.display())))?;
    if codec != 1 {
        return Err(Error::Format(format!(
            "{}: audio format {codec}, expected PCM (1)",
            path.display()
        )));
    }
    if channels != 1 {
        return Err(Error::Format(format!(
            "{}: channel count {channels}, expected mono",
            path.display()
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(Error::Format(format!(
            "{}: sample rate {rate}, expected {SAMPLE_RATE}",
            path.display()
        )));
    }
    if bits != 16 {
        return Err(Error::Format(format!(
            "{}: bit depth {bits}, expected 16",
            path.display()
        )));
    }
    let data =
        data.ok_or_else(|| Error::Format(format!("{}: missing data chunk", path.display())))?;
    if data.len() % 2 != 0 {
        return Err(Error::Format(format!(
            "{}: data chunk of odd size {}",
            path.display(),
            data.len()
        )));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
        .collect();
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("wav")
        .to_string();
    AudioClip::new(samples, SAMPLE_RATE, id)
}

/// Write a clip as PCM16 mono; samples are clamped to [-1, 1] and quantized
/// by 32768.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round() as i32;
        let q = q.clamp(i32::from(i16::MIN), i32::from(i16::MAX)) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("ivx-wav-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_within_quantization() {
        let samples: Vec<f64> = (0..1600)
            .map(|i| 0.8 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin())
            .collect();
        let clip = AudioClip::new(samples.clone(), SAMPLE_RATE, "rt").unwrap();
        let path = temp_path("rt.wav");
        write_wav(&path, &clip).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples.len(), samples.len());
        for (a, b) in back.samples.iter().zip(&samples) {
            assert!(
                (a - b).abs() <= 1.0 / 32768.0,
                "sample {a} vs {b} beyond quantization"
            );
        }
    }

    #[test]
    fn extreme_sample_scaling_convention() {
        // 0x7FFF must decode to 32767/32768.
        let path = temp_path("extreme.wav");
        let clip = AudioClip::new(vec![1.0, -1.0, 0.0], SAMPLE_RATE, "x").unwrap();
        write_wav(&path, &clip).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples[0], 32767.0 / 32768.0);
        assert_eq!(back.samples[1], -1.0);
        assert_eq!(back.samples[2], 0.0);
    }

    fn write_raw(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = temp_path(name);
        std::fs::write(&path, bytes).unwrap();
        path
    }

    fn valid_header(channels: u16, rate: u32, bits: u16, codec: u16) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&40u32.to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&codec.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * u32::from(channels) * 2).to_le_bytes());
        out.extend_from_slice(&(channels * 2).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&[0, 0, 0, 0]);
        out
    }

    #[test]
    fn stereo_is_named_in_the_error() {
        let path = write_raw("stereo.wav", &valid_header(2, 16000, 16, 1));
        match load_wav(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("channel count 2"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_rate_bits_codec_are_rejected() {
        let cases = [
            (valid_header(1, 44100, 16, 1), "sample rate 44100"),
            (valid_header(1, 16000, 8, 1), "bit depth 8"),
            (valid_header(1, 16000, 16, 3), "audio format 3"),
        ];
        for (i, (bytes, needle)) in cases.iter().enumerate() {
            let path = write_raw(&format!("bad{i}.wav"), bytes);
            match load_wav(&path) {
                Err(Error::Format(msg)) => assert!(msg.contains(needle), "{msg}"),
                other => panic!("expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let path = write_raw("tiny.wav", b"RI");
        assert!(matches!(load_wav(&path), Err(Error::Format(_))));
        let path = write_raw("notriff.wav", b"JUNKxxxxWAVE");
        assert!(matches!(load_wav(&path), Err(Error::Format(_))));
        let mut truncated = valid_header(1, 16000, 16, 1);
        truncated.truncate(truncated.len() - 2);
        let path = write_raw("trunc.wav", &truncated);
        assert!(matches!(load_wav(&path), Err(Error::Format(_))));
    }
}

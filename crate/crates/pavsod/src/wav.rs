//! Minimal WAV reader/writer: PCM 16-bit and IEEE float-32, interleaved.
//!
//! Ambisonic clips are stored as 4-channel float-32 so that save/load
//! round-trips are bit-exact. Reads accept PCM16 too (scaled by 1/32768).

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct WavData {
    pub sample_rate: u32,
    pub channels: u16,
    /// Per-channel sample buffers, deinterleaved.
    pub samples: Vec<Vec<f32>>,
}

pub fn write_wav_f32(path: &Path, sample_rate: u32, channels: &[Vec<f32>]) -> Result<()> {
    let n_ch = channels.len() as u16;
    let n_frames = channels.first().map_or(0, |c| c.len());
    if channels.iter().any(|c| c.len() != n_frames) {
        return Err(Error::invalid("write_wav", "channel length mismatch"));
    }
    let data_len = (n_frames * channels.len() * 4) as u32;
    let byte_rate = sample_rate * u32::from(n_ch) * 4;
    let block_align = n_ch * 4;

    let mut out = Vec::with_capacity(data_len as usize + 64);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
    out.extend_from_slice(&n_ch.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for i in 0..n_frames {
        for ch in channels {
            out.extend_from_slice(&ch[i].to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let err = |offset: usize, detail: String| Error::Parse {
        what: "WAV",
        offset,
        detail,
    };
    if buf.len() < 12 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        return Err(err(0, "not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, length
    while pos + 8 <= buf.len() {
        let id = &buf[pos..pos + 4];
        let len = u32::from_le_bytes([buf[pos + 4], buf[pos + 5], buf[pos + 6], buf[pos + 7]]) as usize;
        let body = pos + 8;
        if body + len > buf.len() {
            return Err(err(pos, format!("chunk {} overruns file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(err(body, "fmt chunk too short".into()));
                }
                let format = u16::from_le_bytes([buf[body], buf[body + 1]]);
                let channels = u16::from_le_bytes([buf[body + 2], buf[body + 3]]);
                let rate = u32::from_le_bytes([buf[body + 4], buf[body + 5], buf[body + 6], buf[body + 7]]);
                let bits = u16::from_le_bytes([buf[body + 14], buf[body + 15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some((body, len)),
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    let (format, n_ch, rate, bits) = fmt.ok_or_else(|| err(buf.len(), "missing fmt chunk".into()))?;
    let (doff, dlen) = data.ok_or_else(|| err(buf.len(), "missing data chunk".into()))?;
    if n_ch == 0 {
        return Err(Error::WavFormat("zero channels".into()));
    }
    let mut samples = vec![Vec::new(); n_ch as usize];
    match (format, bits) {
        (3, 32) => {
            let n = dlen / 4;
            for i in 0..n {
                let o = doff + i * 4;
                let v = f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
                samples[i % n_ch as usize].push(v);
            }
        }
        (1, 16) => {
            let n = dlen / 2;
            for i in 0..n {
                let o = doff + i * 2;
                let v = i16::from_le_bytes([buf[o], buf[o + 1]]);
                samples[i % n_ch as usize].push(f32::from(v) / 32768.0);
            }
        }
        (f, b) => {
            return Err(Error::WavFormat(format!(
                "only PCM16 and float-32 supported, got format {f} with {b} bits"
            )))
        }
    }
    Ok(WavData {
        sample_rate: rate,
        channels: n_ch,
        samples,
    })
}

/// Read a WAV that must have exactly `expected` channels.
pub fn read_wav_channels(path: &Path, expected: u16) -> Result<WavData> {
    let w = read_wav(path)?;
    if w.channels != expected {
        return Err(Error::WavChannelCount {
            expected,
            found: w.channels,
        });
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join("pavsod_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("probe.wav");
        let chans: Vec<Vec<f32>> = (0..4)
            .map(|c| (0..100).map(|i| ((i * (c + 1)) as f32 * 0.01).sin()).collect())
            .collect();
        write_wav_f32(&p, 8000, &chans).unwrap();
        let back = read_wav_channels(&p, 4).unwrap();
        assert_eq!(back.sample_rate, 8000);
        for (a, b) in back.samples.iter().zip(&chans) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn channel_count_checked() {
        let dir = std::env::temp_dir().join("pavsod_wav_chan");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("two.wav");
        write_wav_f32(&p, 8000, &[vec![0.0; 8], vec![0.0; 8]]).unwrap();
        match read_wav_channels(&p, 4) {
            Err(Error::WavChannelCount { expected: 4, found: 2 }) => {}
            other => panic!("expected channel-count error, got {other:?}"),
        }
    }

    #[test]
    fn pcm16_read_scales() {
        let dir = std::env::temp_dir().join("pavsod_wav_pcm");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("pcm.wav");
        // Hand-assemble a 1-channel PCM16 file with samples [0, 16384, -32768].
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36u32 + 6).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&8000u32.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&6u32.to_le_bytes());
        for s in [0i16, 16384, -32768] {
            out.extend_from_slice(&s.to_le_bytes());
        }
        std::fs::write(&p, out).unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples[0], vec![0.0, 0.5, -1.0]);
    }

    #[test]
    fn garbage_rejected() {
        let dir = std::env::temp_dir().join("pavsod_wav_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.wav");
        std::fs::write(&p, b"not a wav at all").unwrap();
        assert!(read_wav(&p).is_err());
    }
}

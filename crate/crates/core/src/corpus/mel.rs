//! Mel spectrogram carrier and the MEL1 file format: little-endian binary,
//! magic "MEL1", u32 frame count T, u32 dimension D, f64 frame shift in
//! seconds, then T·D f32 values row-major. Frames are stored as f32, so a
//! save/load round trip is bit-exact.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MEL1";

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<F> {
    pub frames: Tensor<F>,
    pub frame_shift_s: f64,
}

impl<F: Scalar> MelSpectrogram<F> {
    pub fn new(frames: Tensor<F>, frame_shift_s: f64) -> Result<Self> {
        let mel = MelSpectrogram {
            frames,
            frame_shift_s,
        };
        mel.validate()?;
        Ok(mel)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.rows() == 0 || self.frames.cols() == 0 {
            return Err(Error::Validation("mel must have T ≥ 1 and D ≥ 1".into()));
        }
        if !(self.frame_shift_s.is_finite() && self.frame_shift_s > 0.0) {
            return Err(Error::Validation("mel frame shift must be positive".into()));
        }
        if !self.frames.all_finite() {
            return Err(Error::NonFinite("mel contains non-finite values".into()));
        }
        Ok(())
    }

    /// Rounds frames to the f32 storage precision, so the in-memory matrix
    /// equals what a save/load round trip returns.
    pub fn round_to_storage(&mut self) {
        round_to_f32(&mut self.frames);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let mut buf: Vec<u8> =
            Vec::with_capacity(4 + 4 + 4 + 8 + self.frames.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&self.frame_shift_s.to_le_bytes());
        for &v in self.frames.data() {
            let f = v.to_f32().ok_or_else(|| {
                Error::NonFinite("mel value not representable as f32".into())
            })?;
            buf.extend_from_slice(&f.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: not a MEL1 file (magic {:?})",
                path.display(),
                magic
            )));
        }
        let mut u32buf = [0u8; 4];
        reader.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let t = u32::from_le_bytes(u32buf) as usize;
        reader.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let d = u32::from_le_bytes(u32buf) as usize;
        let mut f64buf = [0u8; 8];
        reader.read_exact(&mut f64buf).map_err(|e| Error::io(path, e))?;
        let frame_shift_s = f64::from_le_bytes(f64buf);

        let mut data = vec![0u8; t * d * 4];
        reader.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
        let mut frames = Tensor::zeros(t.max(1), d.max(1));
        if t == 0 || d == 0 {
            return Err(Error::Format(format!(
                "{}: mel must have T ≥ 1 and D ≥ 1",
                path.display()
            )));
        }
        for (i, chunk) in data.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunk size 4"));
            frames.data_mut()[i] = F::from_f32(v)
                .ok_or_else(|| Error::Format("mel value out of range".into()))?;
        }
        let mel = MelSpectrogram {
            frames,
            frame_shift_s,
        };
        mel.validate()?;
        Ok(mel)
    }
}

/// Writes arbitrary scalar frames by first rounding them to f32, so that the
/// in-memory matrix equals what a later `load` returns.
pub(crate) fn round_to_f32<F: Scalar>(frames: &mut Tensor<F>) {
    for v in frames.data_mut() {
        let f = v.to_f32().unwrap_or(0.0);
        *v = F::from_f32(f).unwrap_or_else(F::zero);
    }
}

//! Decoder checkpoint save/load.
//!
//! A checkpoint is a directory holding:
//! - `embedding.ngme`  — the token embedding table in the NGME format
//! - `tensors.bin`     — all remaining tensors, raw little-endian f32
//! - `manifest.json`   — version, decoder config, per-tensor shapes and
//!   byte offsets into the blob

use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f32_vec, write_f32_slice};

use super::{Decoder, LayerWeights, ToyDecoderConfig};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into tensors.bin.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ToyDecoderConfig,
    tensors: Vec<TensorEntry>,
}

struct BlobWriter {
    file: BufWriter<File>,
    offset: u64,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
        debug_assert_eq!(rows * cols, values.len());
        self.entries.push(TensorEntry {
            name: name.to_string(),
            rows,
            cols,
            offset: self.offset,
        });
        write_f32_slice(&mut self.file, values)?;
        self.offset += (values.len() * 4) as u64;
        Ok(())
    }
}

struct BlobReader {
    file: BufReader<File>,
    entries: Vec<TensorEntry>,
    cursor: usize,
}

impl BlobReader {
    fn take(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f32>> {
        let entry = self.entries.get(self.cursor).ok_or_else(|| {
            Error::Format(format!("manifest is missing tensor {name:?}"))
        })?;
        if entry.name != name || entry.rows != rows || entry.cols != cols {
            return Err(Error::Format(format!(
                "expected tensor {name:?} of {rows}x{cols}, manifest has {:?} of {}x{}",
                entry.name, entry.rows, entry.cols
            )));
        }
        self.file.seek(SeekFrom::Start(entry.offset))?;
        let values = read_f32_vec(&mut self.file, rows * cols)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptTable(format!(
                "tensor {name:?} contains non-finite values"
            )));
        }
        self.cursor += 1;
        Ok(values)
    }
}

impl Decoder {
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        crate::io::write_table(dir.join("embedding.ngme"), &self.embed)?;

        let mut blob = BlobWriter {
            file: BufWriter::new(File::create(dir.join("tensors.bin"))?),
            offset: 0,
            entries: Vec::new(),
        };
        let d = self.config.dim;
        blob.push("pos", self.config.max_context, d, &self.pos)?;
        for (l, layer) in self.layers.iter().enumerate() {
            blob.push(&format!("layers.{l}.attn_norm"), 1, d, &layer.attn_norm)?;
            blob.push(&format!("layers.{l}.wq"), d, d, &layer.wq)?;
            blob.push(&format!("layers.{l}.wk"), d, d, &layer.wk)?;
            blob.push(&format!("layers.{l}.wv"), d, d, &layer.wv)?;
            blob.push(&format!("layers.{l}.wo"), d, d, &layer.wo)?;
            blob.push(&format!("layers.{l}.mlp_norm"), 1, d, &layer.mlp_norm)?;
            blob.push(&format!("layers.{l}.fc1"), 4 * d, d, &layer.fc1)?;
            blob.push(&format!("layers.{l}.fc2"), d, 4 * d, &layer.fc2)?;
        }
        blob.push("final_norm", 1, d, &self.final_norm)?;
        if let Some(u) = &self.unembed {
            blob.push("unembed", self.config.vocab_size, d, u)?;
        }
        blob.file.flush()?;

        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            tensors: blob.entries,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Decoder> {
        let dir = dir.as_ref();
        let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let config = manifest.config.clone();
        config.validate()?;

        let embed = crate::io::read_table(dir.join("embedding.ngme"))?;
        if embed.vocab_size() != config.vocab_size || embed.dim() != config.dim {
            return Err(Error::Format(format!(
                "embedding table is {}x{} but config says {}x{}",
                embed.vocab_size(),
                embed.dim(),
                config.vocab_size,
                config.dim
            )));
        }

        let mut blob = BlobReader {
            file: BufReader::new(File::open(dir.join("tensors.bin"))?),
            entries: manifest.tensors,
            cursor: 0,
        };
        let d = config.dim;
        let pos = blob.take("pos", config.max_context, d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            layers.push(LayerWeights {
                attn_norm: blob.take(&format!("layers.{l}.attn_norm"), 1, d)?,
                wq: blob.take(&format!("layers.{l}.wq"), d, d)?,
                wk: blob.take(&format!("layers.{l}.wk"), d, d)?,
                wv: blob.take(&format!("layers.{l}.wv"), d, d)?,
                wo: blob.take(&format!("layers.{l}.wo"), d, d)?,
                mlp_norm: blob.take(&format!("layers.{l}.mlp_norm"), 1, d)?,
                fc1: blob.take(&format!("layers.{l}.fc1"), 4 * d, d)?,
                fc2: blob.take(&format!("layers.{l}.fc2"), d, 4 * d)?,
            });
        }
        let final_norm = blob.take("final_norm", 1, d)?;
        let unembed = if config.tied_embeddings {
            None
        } else {
            Some(blob.take("unembed", config.vocab_size, d)?)
        };

        // Leftover space in tensors.bin is tolerated; a leftover manifest
        // entry is not.
        if blob.cursor != blob.entries.len() {
            return Err(Error::Format(format!(
                "manifest lists {} tensors, loaded {}",
                blob.entries.len(),
                blob.cursor
            )));
        }
        Ok(Decoder::from_parts(config, embed, pos, layers, final_norm, unembed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::SamplerConfig;

    fn config() -> ToyDecoderConfig {
        ToyDecoderConfig {
            num_layers: 2,
            dim: 16,
            num_heads: 2,
            vocab_size: 32,
            max_context: 32,
            seed: 77,
            tied_embeddings: false,
        }
    }

    #[test]
    fn round_trip_preserves_weights_and_logits() {
        let dir = tempfile::tempdir().unwrap();
        let decoder = Decoder::init(config()).unwrap();
        decoder.save_checkpoint(dir.path()).unwrap();
        let loaded = Decoder::load_checkpoint(dir.path()).unwrap();
        assert_eq!(decoder.weights_fingerprint(), loaded.weights_fingerprint());
        let ids = [1u32, 5, 9, 2];
        let a = decoder.prefill(&ids, None, false).unwrap().logits;
        let b = loaded.prefill(&ids, None, false).unwrap().logits;
        assert_eq!(a.raw(), b.raw());
        let ga = decoder.generate(&ids, 8, &SamplerConfig::greedy(), None).unwrap();
        let gb = loaded.generate(&ids, 8, &SamplerConfig::greedy(), None).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let decoder = Decoder::init(config()).unwrap();
        decoder.save_checkpoint(dir.path()).unwrap();
        // Poison one float in the blob with NaN.
        let blob_path = dir.path().join("tensors.bin");
        let mut bytes = std::fs::read(&blob_path).unwrap();
        bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&blob_path, bytes).unwrap();
        assert!(matches!(
            Decoder::load_checkpoint(dir.path()),
            Err(Error::CorruptTable(_))
        ));
    }

    #[test]
    fn missing_and_malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Decoder::load_checkpoint(dir.path()),
            Err(Error::Io(_))
        ));
        let decoder = Decoder::init(config()).unwrap();
        decoder.save_checkpoint(dir.path()).unwrap();
        std::fs::write(dir.path().join("manifest.json"), "{not json").unwrap();
        assert!(matches!(
            Decoder::load_checkpoint(dir.path()),
            Err(Error::Format(_))
        ));
    }
}

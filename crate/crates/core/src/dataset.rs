//! Line-oriented dataset files.
//!
//! The first line is a JSON header carrying the vocabulary and the sample
//! count; every following line is one sample record. Masks are embedded in
//! the `"W H r0 r1 ..."` RLE text form and the rendered image as base64 RGB.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Grid;
use crate::scene::{ConceptVocab, DataSample, DataType, Image, SceneInstance};

pub const FORMAT_NAME: &str = "granu-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: ConceptVocab,
    pub samples: Vec<DataSample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    vocab: ConceptVocab,
}

#[derive(Serialize, Deserialize)]
struct Record {
    grid: Grid,
    data_type: DataType,
    instances: Vec<SceneInstance>,
    seed: u64,
    image: String,
}

impl Dataset {
    pub fn new(vocab: ConceptVocab, samples: Vec<DataSample>) -> Self {
        Self { vocab, samples }
    }

    pub fn of_type(&self, t: DataType) -> impl Iterator<Item = &DataSample> {
        self.samples.iter().filter(move |s| s.data_type == t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            count: self.samples.len(),
            vocab: self.vocab.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for s in &self.samples {
            let rec = Record {
                grid: s.grid,
                data_type: s.data_type,
                instances: s.instances.clone(),
                seed: s.seed,
                image: B64.encode(s.image.bytes()),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a whole file; any defect fails the load with its 1-based line number.
    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(1, "missing header"))??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| Error::format(1, format!("bad header: {e}")))?;
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(Error::format(
                1,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        header
            .vocab
            .validate()
            .map_err(|e| Error::format(1, e.to_string()))?;

        let mut samples = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| Error::format(lineno, e.to_string()))?;
            let bytes = B64
                .decode(rec.image.as_bytes())
                .map_err(|e| Error::format(lineno, format!("bad image: {e}")))?;
            let image = Image::new(rec.grid, bytes).map_err(|e| Error::format(lineno, e.to_string()))?;
            let sample = DataSample {
                grid: rec.grid,
                data_type: rec.data_type,
                instances: rec.instances,
                seed: rec.seed,
                image,
            };
            sample
                .validate()
                .map_err(|e| Error::format(lineno, e.to_string()))?;
            check_concepts(&sample, &header.vocab).map_err(|msg| Error::format(lineno, msg))?;
            samples.push(sample);
        }
        if samples.len() != header.count {
            return Err(Error::format(
                samples.len() + 2,
                format!("expected {} samples, found {}", header.count, samples.len()),
            ));
        }
        Ok(Self {
            vocab: header.vocab,
            samples,
        })
    }

    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

fn check_concepts(s: &DataSample, vocab: &ConceptVocab) -> std::result::Result<(), String> {
    for inst in &s.instances {
        if inst.object_concept.is_some_and(|c| c >= vocab.num_objects()) {
            return Err("object concept outside vocabulary".into());
        }
        if inst
            .parts
            .iter()
            .any(|p| p.concept.is_some_and(|c| c >= vocab.num_parts()))
        {
            return Err("part concept outside vocabulary".into());
        }
    }
    Ok(())
}

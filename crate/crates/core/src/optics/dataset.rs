use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layout::LensletLayout;
use super::phantom::{DatasetKind, SequenceDataset, VolumeSource};
use super::psf::PSFStack;
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    kind: DatasetKind,
    frames: usize,
    sources: usize,
    volume_source: VolumeSource,
    seed: u64,
    layout: LensletLayout,
    config: serde_json::Value,
}

impl SequenceDataset {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_json(
            "metadata",
            &Metadata {
                kind: self.kind,
                frames: self.len(),
                sources: self.positions.len(),
                volume_source: self.volume_source,
                seed: self.seed,
                layout: self.layout.clone(),
                config: self.config.clone(),
            },
        )?;
        for (i, (v, img)) in self.volumes.iter().zip(&self.images).enumerate() {
            a.insert_tensor(format!("volume/{i}"), v.clone())?;
            a.insert_tensor(format!("image/{i}"), img.clone())?;
        }
        if !self.positions.is_empty() {
            let k = self.positions.len();
            let pos = self.positions.iter().flat_map(|p| p.iter().map(|&c| c as f32)).collect();
            a.insert_tensor("neuron_positions", Tensor::new(&[k, 3], pos)?)?;
            let tr = self.traces.iter().flatten().copied().collect();
            a.insert_tensor("neuron_traces", Tensor::new(&[k, self.len()], tr)?)?;
        }
        a.insert_tensor("psf", self.psf.kernels().clone())?;
        let c = self.layout.centers.iter().flat_map(|c| [c[0] as f32, c[1] as f32]).collect();
        a.insert_tensor("centers", Tensor::new(&[self.layout.len(), 2], c)?)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta: Metadata = a.json("metadata")?;
        if meta.frames == 0 {
            return Err(Error::Format("dataset has no frames".into()));
        }
        let mut volumes = Vec::with_capacity(meta.frames);
        let mut images = Vec::with_capacity(meta.frames);
        for i in 0..meta.frames {
            volumes.push(a.tensor(&format!("volume/{i}"))?.clone());
            images.push(a.tensor(&format!("image/{i}"))?.clone());
        }
        let (positions, traces) = if meta.sources > 0 {
            let p = a.tensor("neuron_positions")?;
            let t = a.tensor("neuron_traces")?;
            if p.shape() != [meta.sources, 3] || t.shape() != [meta.sources, meta.frames] {
                return Err(Error::Format("neuron tables disagree with metadata".into()));
            }
            (
                p.data()
                    .chunks_exact(3)
                    .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
                    .collect(),
                t.data().chunks_exact(meta.frames).map(|c| c.to_vec()).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let psf = PSFStack::new(a.tensor("psf")?.clone(), meta.layout.sensor_size)?;
        Ok(Self {
            kind: meta.kind,
            volumes,
            images,
            positions,
            traces,
            layout: meta.layout,
            psf,
            volume_source: meta.volume_source,
            seed: meta.seed,
            config: meta.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use crate::optics::{gen_beads, gen_sequence, BeadConfig, OpticsConfig, PhantomConfig, SequenceDataset};

    #[test]
    fn archive_round_trip() {
        let cfg = PhantomConfig::default();
        let (layout, psf) = OpticsConfig::default().build(16).unwrap();
        let d = gen_sequence(&cfg, &psf, &layout, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cwfa");
        d.save(&path).unwrap();
        let back = SequenceDataset::load(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_archive().unwrap().to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn empty_bead_dataset_round_trips() {
        let cfg = BeadConfig {
            density: 0.0,
            ..BeadConfig::default()
        };
        let (layout, psf) = OpticsConfig::default().build(16).unwrap();
        let d = gen_beads(&cfg, &psf, &layout, 2).unwrap();
        let back = SequenceDataset::from_archive(&d.to_archive().unwrap()).unwrap();
        assert_eq!(back, d);
    }
}

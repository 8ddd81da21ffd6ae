//! Trained U-Net checkpoints (`.ckpt`): a JSON header line followed by the
//! parameters as little-endian f32 blobs in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::grid::NormStats;

use super::unet::{Param, UNetConfig, UNetLayout};

const FORMAT: &str = "ozbias-unet-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: UNetConfig,
    pub channels: Vec<String>,
    pub norm: NormStats,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
    pub params: Vec<Param<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: UNetConfig,
    channels: Vec<String>,
    norm: NormStats,
    history: Vec<f64>,
    params: Vec<ParamEntry>,
}

impl ModelCheckpoint {
    /// Checks the parameters against the architecture the config implies.
    pub fn new(
        config: UNetConfig,
        channels: Vec<String>,
        norm: NormStats,
        history: Vec<f64>,
        params: Vec<Param<f32>>,
    ) -> Result<Self> {
        UNetLayout::new(&config)?.check_params(&params)?;
        if channels.len() != config.in_channels || norm.channels != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                found: norm.channels,
            });
        }
        Ok(ModelCheckpoint {
            config,
            channels,
            norm,
            history,
            params,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: FORMAT.into(),
            config: self.config.clone(),
            channels: self.channels.clone(),
            norm: self.norm.clone(),
            history: self.history.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let payload: Vec<u8> = self.params.iter().flat_map(|p| p.data.iter().flat_map(|v| v.to_le_bytes())).collect();
        container::write(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (h, payload): (Header, _) = container::read(path)?;
        container::check_tag(path, "format", &h.format, FORMAT)?;
        let total: usize = h.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 4 {
            return Err(Error::format(path, format!("payload has {} bytes, expected {}", payload.len(), total * 4)));
        }
        let mut chunks = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let params = h
            .params
            .into_iter()
            .map(|e| {
                let n = e.shape.iter().product();
                Param {
                    name: e.name,
                    shape: e.shape,
                    data: chunks.by_ref().take(n).collect(),
                }
            })
            .collect();
        ModelCheckpoint::new(h.config, h.channels, h.norm, h.history, params).map_err(|e| Error::format(path, e.to_string()))
    }
}

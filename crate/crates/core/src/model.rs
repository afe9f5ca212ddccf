//! A backbone paired with one sampler head, sharing one parameter store.

use alloc::vec::Vec;

use crate::backbone::{Backbone, BackboneConfig, FrameInput};
use crate::error::{Error, Result};
use crate::heads::consistency::ConsistencyHead;
use crate::heads::rq::{RqConfig, RqHead};
use crate::heads::trigflow::TrigFlowHead;
use crate::heads::{HeadConfig, HeadKind};
use crate::nn::{ParamId, ParamStore};
use crate::rng;
use crate::source::rvq::RvqCodebooks;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum HeadSpec {
    Consistency(HeadConfig),
    TrigFlow(HeadConfig),
    Rq(RqConfig),
}

impl HeadSpec {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadSpec::Consistency(_) => HeadKind::Consistency,
            HeadSpec::TrigFlow(_) => HeadKind::TrigFlow,
            HeadSpec::Rq(_) => HeadKind::Rq,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadSpec,
}

#[derive(Debug, Clone)]
pub enum Head {
    Consistency(ConsistencyHead),
    TrigFlow(TrigFlowHead),
    Rq(RqHead),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Consistency(_) => HeadKind::Consistency,
            Head::TrigFlow(_) => HeadKind::TrigFlow,
            Head::Rq(_) => HeadKind::Rq,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Head::Consistency(h) => h.params(),
            Head::TrigFlow(h) => h.params(),
            Head::Rq(h) => h.params().to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
    /// Frozen quantizer for the discrete head.
    pub codebooks: Option<RvqCodebooks>,
    init_head_checksum: u64,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let d = config.backbone.model_dim;
        let mut bcfg = config.backbone.clone();
        match &config.head {
            HeadSpec::Consistency(h) | HeadSpec::TrigFlow(h) => {
                if h.channels != bcfg.channels || h.cond_dim != d {
                    return Err(crate::error::shape_err(
                        "head dims",
                        (bcfg.channels, d),
                        (h.channels, h.cond_dim),
                    ));
                }
            }
            HeadSpec::Rq(r) => {
                if r.cond_dim != d {
                    return Err(crate::error::shape_err("rq cond dim", d, r.cond_dim));
                }
                bcfg.input = FrameInput::Codes(r.sizes.clone());
                bcfg.noise_injection = false;
            }
        }
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, 21);
        let backbone = Backbone::new(&mut store, &mut r, bcfg.clone())?;
        let head = match &config.head {
            HeadSpec::Consistency(h) => {
                Head::Consistency(ConsistencyHead::new(&mut store, &mut r, h.clone())?)
            }
            HeadSpec::TrigFlow(h) => {
                Head::TrigFlow(TrigFlowHead::new(&mut store, &mut r, h.clone())?)
            }
            HeadSpec::Rq(c) => Head::Rq(RqHead::new(&mut store, &mut r, c.clone())?),
        };
        let init_head_checksum = store.checksum_of(head.params());
        let config = ModelConfig {
            backbone: bcfg,
            head: config.head,
        };
        Ok(Model {
            config,
            store,
            backbone,
            head,
            codebooks: None,
            init_head_checksum,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.backbone.channels
    }

    pub fn head_checksum(&self) -> u64 {
        self.store.checksum_of(self.head.params())
    }

    /// False while the head still holds its initial parameters.
    pub fn head_trained(&self) -> bool {
        self.head_checksum() != self.init_head_checksum
    }

    pub fn initial_head_checksum(&self) -> u64 {
        self.init_head_checksum
    }

    /// Restore the untrained sentinel after loading parameters.
    pub fn set_initial_head_checksum(&mut self, v: u64) {
        self.init_head_checksum = v;
    }

    pub fn require_codebooks(&self) -> Result<&RvqCodebooks> {
        self.codebooks
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("discrete head needs RVQ codebooks".into()))
    }

    /// Same architecture and parameters at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            codebooks: self.codebooks.clone(),
            init_head_checksum: self.init_head_checksum,
        }
    }
}

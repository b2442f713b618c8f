//! Architecture assembly: one [`ModelBundle`] per run wires the
//! segmentation backbone (or plain encoder), the modality fusion block and
//! the classification head chosen by the [`Architecture`].

use crate::error::{Error, Result};
use crate::fusion::{FusionMode, GatHead, GatHeadConfig, JointFusion, MlpHead};
use crate::gnn::{Activation, AttentionTrace, EdgeList, SageLayer};
use crate::nn::{dropout_if_training, BatchNormLayer};
use crate::scalar::Scalar;
use crate::segnet::{ConvEncoder, SegNet, SegNetConfig};
use crate::tabular::NUM_METADATA;
use crate::tensor::{ParamStore, Tape, TensorId};
use crate::trainer::{Architecture, TrainTask};
use rand_chacha::ChaCha8Rng;

pub const NUM_RADIOMICS_FEATURES: usize = 4;

/// GraphSAGE ablation head: batch-norm → dropout → SAGE(→ hidden,
/// leaky-ReLU) → SAGE(→ n_labels, sigmoid), with deterministic
/// full-neighbourhood aggregation.
#[derive(Debug, Clone)]
pub struct SageHead {
    pub in_features: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub n_labels: usize,
    bn: BatchNormLayer,
    layer1: SageLayer,
    layer2: SageLayer,
}

impl SageHead {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_features: usize,
        hidden: usize,
        dropout: f64,
        n_labels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config {
                path: format!("{prefix}.dropout"),
                reason: format!("dropout rate {dropout} outside [0, 1)"),
            });
        }
        let bn = BatchNormLayer::register(store, &format!("{prefix}.bn"), in_features)?;
        let layer1 = SageLayer::register(
            store,
            &format!("{prefix}.sage1"),
            in_features,
            hidden,
            None,
            Activation::LeakyRelu,
            rng,
        )?;
        let layer2 = SageLayer::register(
            store,
            &format!("{prefix}.sage2"),
            hidden,
            n_labels,
            None,
            Activation::Sigmoid,
            rng,
        )?;
        Ok(Self {
            in_features,
            hidden,
            dropout,
            n_labels,
            bn,
            layer1,
            layer2,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        z_c: TensorId,
        graph: &EdgeList,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let x = self.bn.forward(tape, store, z_c, training)?;
        let x = match (training, rng) {
            (true, Some(rng)) => dropout_if_training(tape, x, self.dropout, true, rng)?,
            (true, None) => {
                return Err(Error::InvalidArgument {
                    op: "sage head forward",
                    reason: "training mode requires an rng for dropout".into(),
                })
            }
            (false, _) => x,
        };
        let h = self.layer1.forward(tape, store, x, graph, None)?.out;
        Ok(self.layer2.forward(tape, store, h, graph, None)?.out)
    }
}

/// All trainable components of one run.
pub struct ModelBundle {
    pub arch: Architecture,
    pub task: TrainTask,
    pub segnet: Option<SegNet>,
    pub conv: Option<ConvEncoder>,
    pub fusion: Option<JointFusion>,
    pub gat: Option<GatHead>,
    pub sage: Option<SageHead>,
    pub mlp: Option<MlpHead>,
}

impl ModelBundle {
    /// Register every parameter of the architecture into `store` under the
    /// prefixes `segnet`, `conv`, `fusion` and `head`.  Registration order
    /// is deterministic, so one seed fixes the initialisation.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        arch: Architecture,
        task: TrainTask,
        seg_cfg: &SegNetConfig,
        head_cfg: &GatHeadConfig,
        fusion_mode: FusionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !arch.is_neural() {
            return Err(Error::InvalidArgument {
                op: "ModelBundle::register",
                reason: format!("architecture '{}' has no trainable parameters", arch.name()),
            });
        }
        let n_labels = task.n_labels();
        if n_labels == 0 && arch != Architecture::SegOnly {
            return Err(Error::InvalidArgument {
                op: "ModelBundle::register",
                reason: format!(
                    "task '{}' has no classification labels but architecture '{}' classifies",
                    task.name(),
                    arch.name()
                ),
            });
        }
        if arch == Architecture::SegOnly && task != TrainTask::SegOnly {
            return Err(Error::InvalidArgument {
                op: "ModelBundle::register",
                reason: "the segmentation-only architecture trains only the seg-only task".into(),
            });
        }

        let mut bundle = ModelBundle {
            arch,
            task,
            segnet: None,
            conv: None,
            fusion: None,
            gat: None,
            sage: None,
            mlp: None,
        };

        if arch.has_segmentation() {
            bundle.segnet = Some(SegNet::register(store, "segnet", seg_cfg, rng)?);
        } else if arch == Architecture::ConvMlp {
            bundle.conv = Some(ConvEncoder::register(store, "conv", seg_cfg, rng)?);
        }

        if arch.uses_image() && arch != Architecture::SegOnly {
            let f_c = match fusion_mode {
                FusionMode::Concat => {
                    if head_cfg.in_features % 3 != 0 {
                        return Err(Error::Config {
                            path: "head.in_features".into(),
                            reason: format!(
                                "{} not divisible by 3 modalities under concat fusion",
                                head_cfg.in_features
                            ),
                        });
                    }
                    head_cfg.in_features / 3
                }
                _ => head_cfg.in_features,
            };
            bundle.fusion = Some(JointFusion::register(
                store,
                "fusion",
                seg_cfg.embed_dim,
                NUM_RADIOMICS_FEATURES,
                NUM_METADATA,
                f_c,
                fusion_mode,
                rng,
            )?);
        }

        let head_cfg = GatHeadConfig {
            n_labels,
            ..head_cfg.clone()
        };
        match arch {
            Architecture::UGat | Architecture::UGatPretrained => {
                bundle.gat = Some(GatHead::register(store, "head", &head_cfg, rng)?);
            }
            Architecture::Sage => {
                bundle.sage = Some(SageHead::register(
                    store,
                    "head",
                    head_cfg.in_features,
                    head_cfg.hidden,
                    head_cfg.dropout,
                    n_labels,
                    rng,
                )?);
            }
            Architecture::Mlp | Architecture::ConvMlp => {
                bundle.mlp = Some(MlpHead::register(
                    store,
                    "head",
                    head_cfg.in_features,
                    head_cfg.hidden,
                    head_cfg.dropout,
                    n_labels,
                    rng,
                )?);
            }
            Architecture::MlpMetadata => {
                bundle.mlp = Some(MlpHead::register(
                    store,
                    "head",
                    NUM_METADATA,
                    head_cfg.hidden,
                    head_cfg.dropout,
                    n_labels,
                    rng,
                )?);
            }
            Architecture::SegOnly => {}
            Architecture::Knn | Architecture::Wknn => unreachable!(),
        }
        Ok(bundle)
    }

    /// Fuse modality features and classify.  `z_image` is required except
    /// for the metadata-only head; `graph` (without self-loops; the
    /// attention path adds its own) is required for graph heads.
    #[allow(clippy::too_many_arguments)]
    pub fn classify<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        z_image: Option<TensorId>,
        radiomics: TensorId,
        metadata: TensorId,
        graph: Option<&EdgeList>,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<TensorId> {
        if self.arch == Architecture::MlpMetadata {
            let mlp = self.mlp.as_ref().unwrap();
            return mlp.forward(tape, store, metadata, training, rng);
        }
        let fusion = self.fusion.as_ref().ok_or(Error::InvalidArgument {
            op: "ModelBundle::classify",
            reason: "architecture has no classifier".into(),
        })?;
        let z_image = z_image.ok_or(Error::InvalidArgument {
            op: "ModelBundle::classify",
            reason: "image embedding required for multimodal fusion".into(),
        })?;
        let z_c = fusion.forward(tape, store, z_image, radiomics, metadata)?;
        self.head_forward(tape, store, z_c, graph, training, rng, trace)
    }

    /// Run only the classification head on already-fused features.  Used
    /// at test time, where context nodes enter as cached fused rows.
    #[allow(clippy::too_many_arguments)]
    pub fn head_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        z_c: TensorId,
        graph: Option<&EdgeList>,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<TensorId> {
        let need_graph = || {
            graph.ok_or(Error::InvalidArgument {
                op: "ModelBundle::head_forward",
                reason: "graph head requires a population graph".into(),
            })
        };
        if let Some(gat) = &self.gat {
            let looped = need_graph()?.with_self_loops();
            gat.forward(tape, store, z_c, &looped, training, rng, trace)
        } else if let Some(sage) = &self.sage {
            sage.forward(tape, store, z_c, need_graph()?, training, rng)
        } else if let Some(mlp) = &self.mlp {
            mlp.forward(tape, store, z_c, training, rng)
        } else {
            Err(Error::InvalidArgument {
                op: "ModelBundle::head_forward",
                reason: "architecture has no classification head".into(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tape;

    fn tiny_seg_cfg() -> SegNetConfig {
        SegNetConfig {
            base_filters: 2,
            depth: 2,
            input_size: (8, 8),
            embed_dim: 32,
            ..SegNetConfig::default()
        }
    }

    fn leaf_inputs(
        tape: &mut Tape<f64>,
        n: usize,
        seed: u64,
    ) -> (TensorId, TensorId, TensorId) {
        use rand::Rng;
        let mut rng = stream(seed, "model-test");
        let mut draw = |rows: usize, cols: usize| -> Vec<f64> {
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let z = tape.leaf(draw(n, 32), &[n, 32], false).unwrap();
        let r = tape.leaf(draw(n, 4), &[n, 4], false).unwrap();
        let m = tape.leaf(draw(n, NUM_METADATA), &[n, NUM_METADATA], false).unwrap();
        (z, r, m)
    }

    fn ring(n: usize) -> EdgeList {
        let mut receivers = Vec::new();
        let mut senders = Vec::new();
        for i in 0..n {
            receivers.push(i);
            senders.push((i + 1) % n);
            receivers.push(i);
            senders.push((i + n - 1) % n);
        }
        EdgeList::new(n, receivers, senders).unwrap()
    }

    #[test]
    fn u_gat_bundle_registers_and_classifies() {
        let mut store = ParamStore::<f64>::new();
        let bundle = ModelBundle::register(
            &mut store,
            Architecture::UGat,
            TrainTask::Icu,
            &tiny_seg_cfg(),
            &GatHeadConfig::default(),
            FusionMode::Concat,
            &mut stream(1, "init"),
        )
        .unwrap();
        for name in [
            "segnet.down0.conv1.weight",
            "segnet.embed.weight",
            "fusion.theta_i.weight",
            "head.gat1.head0.theta",
            "head.bn.gamma",
        ] {
            assert!(store.id_of(name).is_some(), "missing parameter {name}");
        }
        let mut tape = Tape::new();
        let (z, r, m) = leaf_inputs(&mut tape, 5, 2);
        let graph = ring(5);
        let probs = bundle
            .classify(&mut tape, &mut store, Some(z), r, m, Some(&graph), false, None, None)
            .unwrap();
        assert_eq!(tape.shape(probs), &[5, 1]);
        assert!(tape.data(probs).iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn sage_mlp_and_metadata_variants_classify() {
        for arch in [Architecture::Sage, Architecture::Mlp, Architecture::MlpMetadata] {
            let mut store = ParamStore::<f64>::new();
            let bundle = ModelBundle::register(
                &mut store,
                arch,
                TrainTask::Multilabel,
                &tiny_seg_cfg(),
                &GatHeadConfig::default(),
                FusionMode::Concat,
                &mut stream(3, "init"),
            )
            .unwrap();
            let mut tape = Tape::new();
            let (z, r, m) = leaf_inputs(&mut tape, 4, 4);
            let graph = ring(4);
            let z_opt = if arch == Architecture::MlpMetadata { None } else { Some(z) };
            let probs = bundle
                .classify(&mut tape, &mut store, z_opt, r, m, Some(&graph), false, None, None)
                .unwrap();
            assert_eq!(tape.shape(probs), &[4, 3], "{}", arch.name());
            assert!(tape.data(probs).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        assert!(ModelBundle::register(
            &mut store,
            Architecture::Knn,
            TrainTask::Icu,
            &tiny_seg_cfg(),
            &GatHeadConfig::default(),
            FusionMode::Concat,
            &mut stream(0, "init"),
        )
        .is_err());
        let mut store = ParamStore::<f64>::new();
        assert!(ModelBundle::register(
            &mut store,
            Architecture::UGat,
            TrainTask::SegOnly,
            &tiny_seg_cfg(),
            &GatHeadConfig::default(),
            FusionMode::Concat,
            &mut stream(0, "init"),
        )
        .is_err());
        let mut store = ParamStore::<f64>::new();
        assert!(ModelBundle::register(
            &mut store,
            Architecture::SegOnly,
            TrainTask::Icu,
            &tiny_seg_cfg(),
            &GatHeadConfig::default(),
            FusionMode::Concat,
            &mut stream(0, "init"),
        )
        .is_err());
    }

    #[test]
    fn seg_only_bundle_has_no_heads() {
        let mut store = ParamStore::<f64>::new();
        let bundle = ModelBundle::register(
            &mut store,
            Architecture::SegOnly,
            TrainTask::SegOnly,
            &tiny_seg_cfg(),
            &GatHeadConfig::default(),
            FusionMode::Concat,
            &mut stream(5, "init"),
        )
        .unwrap();
        assert!(bundle.segnet.is_some());
        assert!(bundle.fusion.is_none() && bundle.gat.is_none() && bundle.mlp.is_none());
        assert!(store.iter().all(|(_, p)| p.name.starts_with("segnet.")));
    }
}

//! Relevance models as checkpoint files.
//!
//! Parameters live under `mtpp.` and `unwarp.`; everything needed to
//! rebuild the model around them is kept in the checkpoint's `meta` object.

use std::path::Path;

use ctes_diff::{Checkpoint, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mtpp::{MtppConfig, MtppModel};
use crate::relevance::{FisherConfig, RelevanceModel, ScoreMode};
use crate::unwarp::{UnwarpConfig, UnwarpNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    mode: ScoreMode,
    mtpp: MtppConfig,
    unwarp: UnwarpConfig,
    unwarp_input_scale: f64,
    fisher: FisherConfig,
    fisher_diag: Option<Vec<f64>>,
    gamma: f64,
}

pub fn model_to_checkpoint(model: &RelevanceModel) -> Checkpoint {
    let mut params = ParamStore::new();
    params.extend_prefixed("mtpp.", model.mtpp.params());
    params.extend_prefixed("unwarp.", model.unwarp.params());
    let meta = ModelMeta {
        mode: model.mode,
        mtpp: model.mtpp.config().clone(),
        unwarp: model.unwarp.config().clone(),
        unwarp_input_scale: model.unwarp.input_scale(),
        fisher: model.fisher.clone(),
        fisher_diag: model.fisher_diag.clone(),
        gamma: model.gamma,
    };
    let mut ckpt = Checkpoint::new(params);
    ckpt.meta = Some(serde_json::to_value(meta).expect("model metadata serializes"));
    ckpt
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<RelevanceModel> {
    let meta = ckpt
        .meta
        .clone()
        .ok_or_else(|| CoreError::Config("checkpoint has no model metadata".into()))?;
    let meta: ModelMeta = serde_json::from_value(meta).map_err(|source| CoreError::Json {
        context: "checkpoint metadata".into(),
        source,
    })?;
    let known = ckpt
        .params
        .names()
        .all(|n| n.starts_with("mtpp.") || n.starts_with("unwarp."));
    if !known {
        return Err(CoreError::Config(
            "checkpoint holds parameters outside mtpp. and unwarp.".into(),
        ));
    }
    let mtpp = MtppModel::from_params(meta.mtpp, ckpt.params.strip_prefix("mtpp."))?;
    let unwarp = UnwarpNet::from_params(
        meta.unwarp,
        meta.unwarp_input_scale,
        ckpt.params.strip_prefix("unwarp."),
    )?;
    let mut model = RelevanceModel::new(meta.mode, mtpp, unwarp, meta.fisher, meta.gamma)?;
    if let Some(diag) = &meta.fisher_diag {
        if diag.len() != model.fisher_dim() {
            return Err(CoreError::Dimension {
                expected: model.fisher_dim(),
                got: diag.len(),
            });
        }
    }
    model.fisher_diag = meta.fisher_diag;
    Ok(model)
}

pub fn save_model(path: &Path, model: &RelevanceModel) -> Result<()> {
    Ok(model_to_checkpoint(model).save(path)?)
}

pub fn load_model(path: &Path) -> Result<RelevanceModel> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

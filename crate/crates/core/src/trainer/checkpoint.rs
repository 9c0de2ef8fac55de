use std::path::Path;

use super::TrainError;
use crate::bodymodel::{build_toy_body, BodyConfig, BodyModel, PartMap};
use crate::equinet::{EquiNet, HeadLayout, NetworkConfig};
use crate::group60::{group_hash, RotationGroup};
use crate::microtensor::{decode_checkpoint, encode_checkpoint, Checkpoint, ParamStore};

/// A network with its weights and the body it was trained on.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: EquiNet,
    pub body: BodyConfig,
    pub part_map: PartMap,
    pub params: ParamStore<f32>,
    pub metadata: Vec<(String, String)>,
}

impl TrainedModel {
    pub fn build_body(&self) -> Result<BodyModel, TrainError> {
        Ok(build_toy_body(&self.body)?)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

/// Writes an `AQW1` checkpoint. Network, body and part map are stored as
/// JSON metadata next to `extra`.
pub fn save_model(path: &Path, group: &RotationGroup, model: &TrainedModel) -> Result<(), TrainError> {
    let mut metadata = vec![
        ("network".to_string(), json(&model.net.config)),
        ("body".to_string(), json(&model.body)),
        ("part_map".to_string(), json(&model.part_map.as_slice())),
        ("parts".to_string(), model.part_map.parts().to_string()),
    ];
    metadata.extend(model.metadata.iter().filter(|(k, _)| !["network", "body", "part_map", "parts"].contains(&k.as_str())).cloned());
    let ck = Checkpoint { group_hash: group_hash(group), metadata, params: model.params.clone() };
    std::fs::write(path, encode_checkpoint(&ck))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`] and checks it against the
/// group, the recorded architecture and the weight layout.
pub fn load_model(path: &Path, group: &RotationGroup) -> Result<TrainedModel, TrainError> {
    let ck = decode_checkpoint(&std::fs::read(path)?)?;
    ck.require_group(&group_hash(group))?;
    let field = |k: &str| ck.meta(k).ok_or_else(|| TrainError::Checkpoint(format!("missing metadata {k:?}")));
    let bad = |e: serde_json::Error| TrainError::Checkpoint(e.to_string());
    let config: NetworkConfig = serde_json::from_str(field("network")?).map_err(bad)?;
    let body: BodyConfig = serde_json::from_str(field("body")?).map_err(bad)?;
    let map: Vec<usize> = serde_json::from_str(field("part_map")?).map_err(bad)?;
    let parts: usize = field("parts")?.parse().map_err(|_| TrainError::Checkpoint("bad part count".into()))?;
    let part_map = PartMap::new(map, parts).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let body_model = build_toy_body(&body)?;
    let net = EquiNet::new(config, HeadLayout::from_body(&body_model, &part_map)?)?;
    net.init_params::<f32>(0).check_layout(&ck.params)?;
    Ok(TrainedModel { net, body, part_map, params: ck.params, metadata: ck.metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group60::build_icosahedral_group;

    fn model() -> TrainedModel {
        let body = BodyConfig { vertices: 800, ..BodyConfig::default() };
        let bm = build_toy_body(&body).unwrap();
        let part_map = PartMap::for_joints(16);
        let net = EquiNet::new(
            NetworkConfig { channels: 8, ..NetworkConfig::default() },
            HeadLayout::from_body(&bm, &part_map).unwrap(),
        )
        .unwrap();
        let params = net.init_params(1);
        TrainedModel { net, body, part_map, params, metadata: vec![("stage".into(), "1".into())] }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.aqw");
        let group = build_icosahedral_group();
        let m = model();
        save_model(&path, &group, &m).unwrap();
        let back = load_model(&path, &group).unwrap();
        assert_eq!(back.net, m.net);
        assert_eq!(back.body, m.body);
        assert_eq!(back.params, m.params);
        assert_eq!(back.meta("stage"), Some("1"));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.aqw");
        let group = build_icosahedral_group();
        save_model(&path, &group, &model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path, &group), Err(TrainError::HashMismatch)));
        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(matches!(load_model(&path, &group), Err(TrainError::Checkpoint(_))));
    }
}

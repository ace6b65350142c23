use crate::codec::LatentCodec;
use crate::error::{LynxError, Result};
use crate::face::FaceEmbedder;
use crate::flow_match::TrainExample;
use crate::media::{load_first_frame, load_media};
use crate::model::LynxModel;

use super::filter::parallel_map;
use super::manifest::{read_embedding, PairRecord};

/// Training clips from pair records. Targets go through `codec`, at most
/// `max_frames` of them; the identity comes from the record's embedding
/// sidecar when present and from the condition image otherwise. The
/// reference latent is the encoded condition image.
pub fn build_examples(
    records: &[PairRecord],
    model: &LynxModel,
    codec: &LatentCodec,
    embedder: &dyn FaceEmbedder,
    max_frames: Option<usize>,
) -> Result<Vec<TrainExample>> {
    let face_dim = model.config.id_adapter.face_dim;
    parallel_map(records, |r| {
        let mut frames = load_media(&r.target)?;
        if let Some(n) = max_frames {
            frames.truncate(n.max(1));
        }
        let latent = codec.encode(&frames)?;
        let cond = load_first_frame(&r.condition_image)?;
        let face = match &r.id_embedding {
            Some(p) => read_embedding(p)?,
            None => embedder
                .embed(&cond)?
                .ok_or_else(|| LynxError::NoFace(format!("condition image {}", r.condition_image.display())))?,
        };
        if face.dim() != face_dim {
            return Err(LynxError::config(
                "id_adapter.face_dim",
                format!("model expects {face_dim}, identity of {} has {}", r.condition_image.display(), face.dim()),
            ));
        }
        Ok(TrainExample {
            latent,
            text: model.embed_text(&r.caption),
            face: Some(face),
            reference: Some(codec.encode(&[cond])?),
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_pipeline::{synth_dataset, SynthSpec};
    use crate::face::StubFaceEmbedder;
    use crate::model::LynxConfig;

    #[test]
    fn synthetic_records_become_examples() {
        let dir = tempfile::tempdir().unwrap();
        let model = LynxModel::new(LynxConfig::default()).unwrap();
        let emb = StubFaceEmbedder::desk(model.config.id_adapter.face_dim);
        let spec = SynthSpec {
            subjects: 2,
            frames: 3,
            width: 32,
            height: 32,
            seed: 1,
        };
        let (_, records) = synth_dataset(dir.path(), &spec, &emb).unwrap();
        let ex = build_examples(&records, &model, &LatentCodec::desk(), &emb, Some(2)).unwrap();
        assert_eq!(ex.len(), records.len());
        let e = &ex[0];
        assert_eq!((e.latent.t, e.latent.h, e.latent.w), (2, 4, 4));
        assert_eq!(e.reference.as_ref().unwrap().t, 1);
        assert_eq!(e.face.as_ref().unwrap().dim(), 64);
    }

    #[test]
    fn wrong_face_dim_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = LynxModel::new(LynxConfig::default()).unwrap();
        let emb = StubFaceEmbedder::desk(16);
        let (_, records) = synth_dataset(dir.path(), &SynthSpec { subjects: 1, ..SynthSpec::default() }, &emb).unwrap();
        let e = build_examples(&records, &model, &LatentCodec::desk(), &emb, None).unwrap_err();
        assert!(e.to_string().contains("face_dim"), "{e}");
    }
}

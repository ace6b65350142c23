use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::face::FaceEmbedder;
use crate::media::load_first_frame;

use super::manifest::PairRecord;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    LowResemblance { resemblance: f64 },
    NoFace { which: String },
    Unreadable { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub record: PairRecord,
    #[serde(flatten)]
    pub reason: DropReason,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<PairRecord>,
    pub dropped: Vec<Dropped>,
}

/// Cosine between the condition image and the target's first frame.
pub fn resemblance(record: &PairRecord, embedder: &dyn FaceEmbedder) -> std::result::Result<f64, DropReason> {
    let mut embs = Vec::with_capacity(2);
    for (which, path) in [("condition_image", &record.condition_image), ("target", &record.target)] {
        let frame = load_first_frame(path).map_err(|e| DropReason::Unreadable { message: e.to_string() })?;
        match embedder.embed(&frame) {
            Ok(Some(e)) => embs.push(e),
            Ok(None) => return Err(DropReason::NoFace { which: which.into() }),
            Err(e) => return Err(DropReason::Unreadable { message: e.to_string() }),
        }
    }
    Ok(embs[0].cosine(&embs[1]).clamp(-1.0, 1.0))
}

/// Keeps records whose resemblance reaches `threshold`, annotating it; every
/// other record lands in `dropped` with a reason. Applies to every pair type.
/// Input order is preserved in both outputs.
pub fn identity_filter(records: &[PairRecord], embedder: &dyn FaceEmbedder, threshold: f64) -> Result<FilterOutcome> {
    let scores = parallel_map(records, |r| resemblance(r, embedder));
    let mut out = FilterOutcome::default();
    for (record, score) in records.iter().zip(scores) {
        let mut record = record.clone();
        match score {
            Ok(s) if s >= threshold => {
                record.resemblance = Some(s);
                out.kept.push(record);
            }
            Ok(s) => out.dropped.push(Dropped {
                record,
                reason: DropReason::LowResemblance { resemblance: s },
            }),
            Err(reason) => out.dropped.push(Dropped { record, reason }),
        }
    }
    Ok(out)
}

/// Order-preserving map over scoped worker threads.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_pipeline::PairType;
    use crate::id_adapter::FaceEmbedding;
    use crate::media::Frame;

    /// Maps a frame's first red value to a prescribed unit vector.
    struct TableEmbedder(Vec<(f64, Vec<f64>)>);

    impl FaceEmbedder for TableEmbedder {
        fn id(&self) -> &str {
            "table"
        }
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, frame: &Frame) -> Result<Option<FaceEmbedding>> {
            let key = frame.pixel(0, 0)[0];
            Ok(self
                .0
                .iter()
                .find(|(k, _)| (k - key).abs() < 1e-3)
                .map(|(_, v)| FaceEmbedding::normalized(v.clone()).unwrap()))
        }
    }

    fn png(dir: &std::path::Path, name: &str, red: f64) -> std::path::PathBuf {
        let p = dir.join(name);
        Frame::filled(4, 4, [red, 0.0, 0.0]).save_png(&p).unwrap();
        p
    }

    #[test]
    fn prescribed_cosines_keep_two_of_three() {
        let dir = tempfile::tempdir().unwrap();
        let mut table = vec![(0.0, vec![1.0, 0.0])];
        let reference = png(dir.path(), "ref.png", 0.0);
        let mut recs = Vec::new();
        for (i, c) in [0.9f64, 0.6, 0.3].into_iter().enumerate() {
            let red = (i + 1) as f64 * 40.0 / 255.0;
            table.push((red, vec![c, (1.0 - c * c).sqrt()]));
            let t = png(dir.path(), &format!("t{i}.png"), red);
            recs.push(PairRecord::new(PairType::MultiScene, reference.clone(), t, "c"));
        }
        recs.push(PairRecord::new(
            PairType::SingleScene,
            reference.clone(),
            dir.path().join("missing.png"),
            "c",
        ));
        let out = identity_filter(&recs, &TableEmbedder(table), 0.5).unwrap();
        assert_eq!(out.kept.len(), 2);
        assert_eq!(out.kept.len() + out.dropped.len(), recs.len());
        assert!(out.kept.iter().all(|r| r.resemblance.unwrap() >= 0.5));
        assert!((out.kept[0].resemblance.unwrap() - 0.9).abs() < 1e-9);
        assert!(matches!(out.dropped[0].reason, DropReason::LowResemblance { .. }));
        assert!(matches!(out.dropped[1].reason, DropReason::Unreadable { .. }));
        assert!(recs.iter().all(|r| r.resemblance.is_none()));
    }

    #[test]
    fn identical_frames_kept_at_threshold_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        let mut f = Frame::filled(32, 32, [0.1; 3]);
        for y in 10..20 {
            for x in 12..18 {
                f.set_pixel(x, y, [0.9, 0.7, 0.6]);
            }
        }
        f.save_png(&p).unwrap();
        let rec = PairRecord::new(PairType::SingleScene, p.clone(), p, "c");
        let e = crate::face::StubFaceEmbedder::desk(16);
        let out = identity_filter(&[rec], &e, 1.0 - 1e-12).unwrap();
        assert_eq!(out.kept.len(), 1);
    }
}

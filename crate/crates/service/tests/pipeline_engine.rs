use std::sync::Arc;
use std::time::Duration;

use icontra_core::fixtures::SamplePhoto;
use icontra_core::pipeline::ExtractionOptions;
use icontra_core::store::{list_results, load_record, RECORD_FILE};
use icontra_core::{EditRequest, Image, Model, ReferenceConfig};
use icontra_service::{JobState, Lineage, PipelineEngine, SessionService, SessionStatus};

const WAIT: Duration = Duration::from_secs(300);

#[test]
fn real_engine_session_with_import() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ReferenceConfig::at_resolution(128)).unwrap();
    let engine = Arc::new(PipelineEngine::new(model, ExtractionOptions::default()));
    let service = SessionService::open(dir.path(), engine.clone()).unwrap();

    let photo: Image = SamplePhoto::Lamp.render(160);
    let (session, job) = service.create_session(&photo, SamplePhoto::Lamp.caption(), None).unwrap();
    let job = service.wait_for_job(&job.id, WAIT).unwrap();
    assert_eq!(job.state, JobState::Done, "{:?}", job.error);
    let session = service.session(&session.id).unwrap();
    assert_eq!(session.status, SessionStatus::Ready);
    assert!(session.reconstruction_psnr.unwrap() >= 25.0);
    let session_dir = service.session_dir(&session.id);
    let (record, manifest) = load_record(&session_dir, engine.model()).unwrap();
    assert_eq!(manifest.caption, SamplePhoto::Lamp.caption());
    assert!(record.object_mask.is_some());

    let job = service.generate(&session.id, 0, EditRequest::new("a photo of a red lamp")).unwrap();
    let job = service.wait_for_job(&job.id, WAIT).unwrap();
    assert_eq!(job.state, JobState::Done, "{:?}", job.error);
    let results = list_results(&session_dir).unwrap();
    assert_eq!(results.len(), 1);
    let checks = &results[0].checks;
    assert!(checks["background_mean_abs_diff"] <= 0.02, "{checks:?}");
    assert_eq!(results[0].config.source_caption, SamplePhoto::Lamp.caption());

    service.import_to_cell(&session.id, 1, Lineage { cell: 0, ordinal: 0 }).unwrap();
    let job = service.generate(&session.id, 1, EditRequest::new("a photo of a wooden chair")).unwrap();
    let job = service.wait_for_job(&job.id, WAIT).unwrap();
    let cell = service.cell(&session.id, 1).unwrap();
    let derived = session_dir.join(&cell.record_dir);
    assert!(derived.join(RECORD_FILE).is_file());
    let (_, derived_manifest) = load_record(&derived, engine.model()).unwrap();
    assert_eq!(derived_manifest.caption, "a photo of a red lamp");
    // the derived record may legitimately be too poor to edit; either way it is reported
    match job.state {
        JobState::Done => assert_eq!(list_results(&session_dir).unwrap().len(), 2),
        _ => assert!(job.error.as_deref().unwrap().contains("PSNR"), "{:?}", job.error),
    }
    service.shutdown();
}

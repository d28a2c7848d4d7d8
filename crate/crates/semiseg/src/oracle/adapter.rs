//! Out-of-process oracle adapter speaking a spool-directory wire protocol.
//!
//! A query drops two files into the spool: the image patch as a NIfTI volume
//! and a JSON request sidecar (written last, as the commit point). The
//! external backend answers with a mask volume and a JSON response sidecar
//! keyed by the same request id. Timeouts and malformed responses are
//! reported as skip reasons, never panics, so a training run survives a dead
//! or slow backend.
//!
//! Wire layout for request id `R`:
//!   `R.img.nii.gz`       patch payload
//!   `R.request.json`     `{version, request_id, spacing, prompts[]}`
//!   `R.mask.nii.gz`      response payload
//!   `R.response.json`    `{version, request_id, model_name, elapsed_ms}`

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::oracle::PromptSet;
use crate::volumes::{nifti, BinaryMask, Volume};

/// Version tag carried by every sidecar.
pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestSidecar {
    pub version: u32,
    pub request_id: String,
    pub spacing: [f64; 3],
    pub prompts: PromptSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseSidecar {
    pub version: u32,
    pub request_id: String,
    pub model_name: String,
    pub elapsed_ms: u64,
}

static REQUEST_COUNTER: AtomicU64 = AtomicU64::new(0);

/// File-spool adapter client.
pub struct SpoolAdapter {
    pub dir: PathBuf,
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl SpoolAdapter {
    pub fn new(dir: impl Into<PathBuf>, timeout: Duration) -> Self {
        SpoolAdapter {
            dir: dir.into(),
            timeout,
            poll_interval: Duration::from_millis(5),
        }
    }

    /// Send one query and wait for the answer. Returns the binarized mask or
    /// a human-readable skip reason.
    pub fn query(&self, patch: &Volume, prompts: &PromptSet) -> Result<BinaryMask, String> {
        let id = format!(
            "req-{:08x}-{:04}",
            std::process::id(),
            REQUEST_COUNTER.fetch_add(1, Ordering::Relaxed)
        );
        let img_path = self.dir.join(format!("{id}.img.nii.gz"));
        let req_path = self.dir.join(format!("{id}.request.json"));
        let mask_path = self.dir.join(format!("{id}.mask.nii.gz"));
        let resp_path = self.dir.join(format!("{id}.response.json"));

        let send = || -> Result<(), String> {
            nifti::write_nifti_f32(&img_path, patch.shape, patch.spacing, &patch.data)
                .map_err(|e| format!("spool write failed: {e}"))?;
            let sidecar = RequestSidecar {
                version: WIRE_VERSION,
                request_id: id.clone(),
                spacing: patch.spacing,
                prompts: prompts.clone(),
            };
            let json = serde_json::to_string(&sidecar).map_err(|e| e.to_string())?;
            std::fs::write(&req_path, json).map_err(|e| format!("spool write failed: {e}"))?;
            Ok(())
        };
        let outcome = send().and_then(|()| {
            let deadline = Instant::now() + self.timeout;
            loop {
                if resp_path.exists() && mask_path.exists() {
                    let text = std::fs::read_to_string(&resp_path)
                        .map_err(|e| format!("response sidecar unreadable: {e}"))?;
                    let sidecar: ResponseSidecar =
                        serde_json::from_str(&text).map_err(|e| format!("bad response sidecar: {e}"))?;
                    if sidecar.version != WIRE_VERSION {
                        return Err(format!(
                            "wire version mismatch: got {}, expected {WIRE_VERSION}",
                            sidecar.version
                        ));
                    }
                    if sidecar.request_id != id {
                        return Err("response id mismatch".to_string());
                    }
                    let nv = nifti::read_nifti(&mask_path)
                        .map_err(|e| format!("response mask unreadable: {e}"))?;
                    if nv.shape != patch.shape {
                        return Err(format!(
                            "response mask shape {:?} does not match patch {:?}",
                            nv.shape, patch.shape
                        ));
                    }
                    return Ok(BinaryMask::from_vec(
                        nv.shape,
                        nv.data.iter().map(|&v| u8::from(v > 0.5)).collect(),
                    ));
                }
                if Instant::now() >= deadline {
                    return Err(format!(
                        "oracle backend did not answer within {:?}",
                        self.timeout
                    ));
                }
                std::thread::sleep(self.poll_interval);
            }
        });
        // best-effort spool hygiene in both outcomes
        for p in [&img_path, &req_path, &mask_path, &resp_path] {
            let _ = std::fs::remove_file(p);
        }
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{Polarity, PromptPoint};

    fn prompts() -> PromptSet {
        PromptSet {
            points: vec![
                PromptPoint {
                    z: 1,
                    y: 2,
                    x: 3,
                    polarity: Polarity::Positive,
                },
                PromptPoint {
                    z: 4,
                    y: 4,
                    x: 4,
                    polarity: Polarity::Negative,
                },
            ],
        }
    }

    /// Minimal mock responder: answers every request in the spool once.
    fn respond_all(dir: &std::path::Path, model: &str) -> usize {
        let mut answered = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_str().unwrap().to_string();
            let Some(id) = name.strip_suffix(".request.json") else {
                continue;
            };
            let sidecar: RequestSidecar =
                serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            assert_eq!(sidecar.version, WIRE_VERSION);
            let img = nifti::read_nifti(&dir.join(format!("{id}.img.nii.gz"))).unwrap();
            // toy segmentation: threshold the patch at its mean
            let mean: f32 = img.data.iter().sum::<f32>() / img.data.len() as f32;
            let mask: Vec<u8> = img.data.iter().map(|&v| u8::from(v > mean)).collect();
            nifti::write_nifti_u8(
                &dir.join(format!("{id}.mask.nii.gz")),
                img.shape,
                img.spacing,
                &mask,
            )
            .unwrap();
            let resp = ResponseSidecar {
                version: WIRE_VERSION,
                request_id: id.to_string(),
                model_name: model.to_string(),
                elapsed_ms: 1,
            };
            std::fs::write(
                dir.join(format!("{id}.response.json")),
                serde_json::to_string(&resp).unwrap(),
            )
            .unwrap();
            answered += 1;
        }
        answered
    }

    #[test]
    fn round_trip_through_spool_directory() {
        let dir = tempfile::tempdir().unwrap();
        let spool = dir.path().to_path_buf();
        let adapter = SpoolAdapter::new(&spool, Duration::from_secs(5));
        let mut patch = Volume::zeros([8, 8, 8], [1.0; 3]);
        for (i, v) in patch.data.iter_mut().enumerate() {
            *v = (i % 10) as f32;
        }
        let responder_dir = spool.clone();
        let handle = std::thread::spawn(move || {
            let deadline = Instant::now() + Duration::from_secs(5);
            let mut answered = 0;
            while answered == 0 && Instant::now() < deadline {
                answered = respond_all(&responder_dir, "mock-seg");
                std::thread::sleep(Duration::from_millis(2));
            }
            answered
        });
        let mask = adapter.query(&patch, &prompts()).unwrap();
        assert_eq!(handle.join().unwrap(), 1);
        assert_eq!(mask.shape, [8, 8, 8]);
        let expect: Vec<u8> = {
            let mean: f32 = patch.data.iter().sum::<f32>() / 512.0;
            patch.data.iter().map(|&v| u8::from(v > mean)).collect()
        };
        assert_eq!(mask.data, expect);
        // spool left clean
        assert_eq!(std::fs::read_dir(&spool).unwrap().count(), 0);
    }

    #[test]
    fn unanswered_query_times_out_with_reason() {
        let dir = tempfile::tempdir().unwrap();
        let adapter = SpoolAdapter::new(dir.path(), Duration::from_millis(50));
        let patch = Volume::zeros([4, 4, 4], [1.0; 3]);
        let start = Instant::now();
        let err = adapter.query(&patch, &prompts()).unwrap_err();
        assert!(start.elapsed() < Duration::from_secs(2));
        assert!(err.contains("did not answer"), "{err}");
    }

    #[test]
    fn unreachable_spool_is_a_skip_reason_not_a_panic() {
        let adapter = SpoolAdapter::new("/nonexistent/spool/dir", Duration::from_millis(50));
        let patch = Volume::zeros([4, 4, 4], [1.0; 3]);
        let err = adapter.query(&patch, &prompts()).unwrap_err();
        assert!(err.contains("spool write failed"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spool = dir.path().to_path_buf();
        let adapter = SpoolAdapter::new(&spool, Duration::from_secs(2));
        let patch = Volume::zeros([4, 4, 4], [1.0; 3]);
        let responder_dir = spool.clone();
        let handle = std::thread::spawn(move || {
            let deadline = Instant::now() + Duration::from_secs(2);
            while Instant::now() < deadline {
                for entry in std::fs::read_dir(&responder_dir).unwrap() {
                    let path = entry.unwrap().path();
                    let name = path.file_name().unwrap().to_str().unwrap().to_string();
                    if let Some(id) = name.strip_suffix(".request.json") {
                        let img =
                            nifti::read_nifti(&responder_dir.join(format!("{id}.img.nii.gz")))
                                .unwrap();
                        nifti::write_nifti_u8(
                            &responder_dir.join(format!("{id}.mask.nii.gz")),
                            img.shape,
                            img.spacing,
                            &vec![0u8; 64],
                        )
                        .unwrap();
                        let resp = ResponseSidecar {
                            version: 999,
                            request_id: id.to_string(),
                            model_name: "old".into(),
                            elapsed_ms: 1,
                        };
                        std::fs::write(
                            responder_dir.join(format!("{id}.response.json")),
                            serde_json::to_string(&resp).unwrap(),
                        )
                        .unwrap();
                        return;
                    }
                }
                std::thread::sleep(Duration::from_millis(2));
            }
        });
        let err = adapter.query(&patch, &prompts()).unwrap_err();
        handle.join().unwrap();
        assert!(err.contains("wire version mismatch"), "{err}");
    }
}

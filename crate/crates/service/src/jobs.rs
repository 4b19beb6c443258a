//! Job records and their lifecycle.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use genprim::authoring::Layer;
use genprim::voxelizer::VoxelGridJson;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Train,
    Generate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_final(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub primitive_id: String,
    pub seed: Option<u64>,
    /// Path of the result resource once done.
    pub result: Option<String>,
    pub error: Option<String>,
}

impl JobRecord {
    pub fn new(id: String, kind: JobKind, primitive_id: String, seed: Option<u64>) -> Self {
        Self { id, kind, status: JobStatus::Queued, progress: 0.0, primitive_id, seed, result: None, error: None }
    }

    /// `queued → running`; false for any other state.
    pub fn start(&mut self) -> bool {
        if self.status != JobStatus::Queued {
            return false;
        }
        self.status = JobStatus::Running;
        true
    }

    /// Raises progress; never lowers it and ignores finished jobs.
    pub fn advance(&mut self, progress: f64) {
        if self.status == JobStatus::Running && progress > self.progress {
            self.progress = progress.min(1.0);
        }
    }

    /// `running → done | failed`, applied at most once.
    pub fn finish(&mut self, outcome: Result<(), String>) -> bool {
        if self.status != JobStatus::Running {
            return false;
        }
        match outcome {
            Ok(()) => {
                self.status = JobStatus::Done;
                self.progress = 1.0;
                self.result = Some(format!("/jobs/{}/result", self.id));
            }
            Err(e) => {
                self.status = JobStatus::Failed;
                self.error = Some(e);
            }
        }
        true
    }
}

/// Intermediate sampler state streamed on a generation job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub step: usize,
    pub grid: VoxelGridJson,
}

#[derive(Debug, Clone)]
pub enum JobOutput {
    Generated { layer: Arc<Layer>, grid_json: Arc<String>, splat: Arc<Vec<u8>> },
    Trained,
}

#[derive(Debug, Clone)]
pub struct JobEntry {
    pub record: JobRecord,
    pub states: Vec<StepState>,
    pub output: Option<JobOutput>,
}

impl JobEntry {
    pub fn new(record: JobRecord) -> Self {
        Self { record, states: Vec::new(), output: None }
    }
}

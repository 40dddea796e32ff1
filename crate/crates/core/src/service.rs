//! Newline-delimited JSON monitor service.
//!
//! Each request line carries one step of one session; each response line is
//! the resulting [`MonitorEvent`] or an error with a machine-readable code.
//! Steps of a session must arrive in order starting at 0. Sessions are
//! independent and may be processed concurrently.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

use crate::ingest::StepKey;
use crate::monitor::{Actual, Expected, Monitor, MonitorError, MonitorEvent};
use crate::store::ActivationStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVector {
    pub layer_id: u32,
    /// base64 of little-endian f32 values
    pub vector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    pub session_id: String,
    pub step_index: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_key: Option<StepKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Expected>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<Actual>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    SessionOrder,
    BadVectorLength,
    NonFinite,
    MissingLayer,
    UnknownStoreKey,
    NoStore,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Event {
        session_id: String,
        event: MonitorEvent,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none")]
        session_id: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        step_index: Option<u32>,
        error: ServiceError,
    },
}

pub fn encode_vector(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn fail(code: ErrorCode, message: impl Into<String>) -> ServiceError {
    ServiceError {
        code,
        message: message.into(),
    }
}

pub fn decode_vector(text: &str, d: usize) -> Result<Vec<f32>, ServiceError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| fail(ErrorCode::Malformed, format!("invalid base64: {e}")))?;
    if bytes.len() != 4 * d {
        return Err(fail(
            ErrorCode::BadVectorLength,
            format!("vector has {} bytes, expected {} ({d} f32 values)", bytes.len(), 4 * d),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(fail(ErrorCode::NonFinite, "vector contains non-finite values"));
    }
    Ok(values)
}

/// Synchronous request handling; the TCP server is a thin wrapper over it.
#[derive(Debug)]
pub struct MonitorService {
    monitor: Arc<Monitor>,
    store: Option<Arc<ActivationStore>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<u32>>>>,
}

impl MonitorService {
    pub fn new(monitor: Monitor, store: Option<ActivationStore>) -> Self {
        Self {
            monitor: Arc::new(monitor),
            store: store.map(Arc::new),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn session(&self, id: &str) -> Arc<Mutex<u32>> {
        let mut sessions = self.sessions.lock().expect("session map poisoned");
        sessions.entry(id.to_string()).or_default().clone()
    }

    pub fn handle_line(&self, line: &str) -> String {
        let response = self.handle(line);
        serde_json::to_string(&response).expect("responses serialize")
    }

    pub fn handle(&self, line: &str) -> Response {
        let request: StepRequest = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                let partial: Option<serde_json::Value> = serde_json::from_str(line).ok();
                let field = |name: &str| partial.as_ref().and_then(|v| v.get(name).cloned());
                return Response::Error {
                    session_id: field("session_id").and_then(|v| v.as_str().map(String::from)),
                    step_index: field("step_index").and_then(|v| v.as_u64()).and_then(|v| u32::try_from(v).ok()),
                    error: fail(ErrorCode::Malformed, e.to_string()),
                };
            }
        };
        let session = self.session(&request.session_id);
        let mut next = session.lock().expect("session poisoned");
        if request.step_index != *next {
            return Response::Error {
                session_id: Some(request.session_id.clone()),
                step_index: Some(request.step_index),
                error: fail(
                    ErrorCode::SessionOrder,
                    format!("expected step {}, got {}", *next, request.step_index),
                ),
            };
        }
        match self.evaluate(&request) {
            Ok(event) => {
                *next += 1;
                Response::Event {
                    session_id: request.session_id,
                    event,
                }
            }
            Err(error) => Response::Error {
                session_id: Some(request.session_id),
                step_index: Some(request.step_index),
                error,
            },
        }
    }

    fn evaluate(&self, request: &StepRequest) -> Result<MonitorEvent, ServiceError> {
        let step = StepKey::new(request.session_id.clone(), request.step_index);
        let expected = request.expected.clone().unwrap_or_default();
        let actual = request.actual.clone();
        let result = if let Some(key) = &request.store_key {
            if !request.layers.is_empty() {
                return Err(fail(ErrorCode::Malformed, "give either layers or store_key, not both"));
            }
            let store = self
                .store
                .as_ref()
                .ok_or_else(|| fail(ErrorCode::NoStore, "service has no activation store"))?;
            let record = store
                .get(key)
                .ok_or_else(|| fail(ErrorCode::UnknownStoreKey, format!("no record for {key}")))?;
            self.monitor.observe(step, |id| record.layer(id), expected, actual)
        } else {
            let mut decoded: HashMap<u32, Vec<f32>> = HashMap::new();
            for layer in &request.layers {
                let sae = self
                    .monitor
                    .stack()
                    .layers()
                    .iter()
                    .find(|l| l.layer_id() == layer.layer_id);
                // Layers the stack does not use are ignored.
                let Some(sae) = sae else { continue };
                decoded.insert(layer.layer_id, decode_vector(&layer.vector, sae.d())?);
            }
            if let Some(missing) = self.monitor.stack().layer_ids().into_iter().find(|id| !decoded.contains_key(id)) {
                return Err(fail(ErrorCode::MissingLayer, format!("request lacks layer {missing}")));
            }
            self.monitor
                .observe(step, |id| decoded.get(&id).map(Vec::as_slice), expected, actual)
        };
        result.map_err(|e: MonitorError| fail(ErrorCode::Internal, e.to_string()))
    }
}

async fn handle_connection(service: Arc<MonitorService>, stream: TcpStream) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let svc = service.clone();
        let mut response = tokio::task::spawn_blocking(move || svc.handle_line(&line))
            .await
            .map_err(std::io::Error::other)?;
        response.push('\n');
        write.write_all(response.as_bytes()).await?;
    }
    write.flush().await
}

/// Accept connections forever; each connection is served on its own task.
pub async fn serve_listener(listener: TcpListener, service: Arc<MonitorService>) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        debug!("connection from {peer}");
        let svc = service.clone();
        tokio::spawn(async move {
            if let Err(e) = handle_connection(svc, stream).await {
                warn!("connection {peer}: {e}");
            }
        });
    }
}

pub async fn serve(addr: SocketAddr, service: Arc<MonitorService>) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    info!("monitor listening on {}", listener.local_addr()?);
    serve_listener(listener, service).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_round_trip() {
        let v = vec![1.5f32, -0.25, 3.0e-7];
        assert_eq!(decode_vector(&encode_vector(&v), 3).unwrap(), v);
        assert_eq!(decode_vector(&encode_vector(&v), 4).unwrap_err().code, ErrorCode::BadVectorLength);
        assert_eq!(decode_vector("@@", 1).unwrap_err().code, ErrorCode::Malformed);
        assert_eq!(
            decode_vector(&encode_vector(&[f32::NAN]), 1).unwrap_err().code,
            ErrorCode::NonFinite
        );
    }
}

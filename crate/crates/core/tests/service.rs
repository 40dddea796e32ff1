mod common;

use std::sync::Arc;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use toolwatch::monitor::{Actual, Expected};
use toolwatch::probe::ToolDecision;
use toolwatch::service::{encode_vector, serve_listener, ErrorCode, LayerVector, MonitorService, Response, StepRequest};
use toolwatch::store::ActivationRecord;

fn inline_request(session: &str, step: u32, record: &ActivationRecord) -> StepRequest {
    StepRequest {
        session_id: session.into(),
        step_index: step,
        layers: record
            .layers
            .iter()
            .map(|l| LayerVector {
                layer_id: l.layer_id,
                vector: encode_vector(&l.values),
            })
            .collect(),
        store_key: None,
        expected: None,
        actual: None,
    }
}

fn line(r: &StepRequest) -> String {
    serde_json::to_string(r).unwrap()
}

fn service(p: &common::Planted) -> MonitorService {
    MonitorService::new(p.monitor(), Some(p.data.store.clone()))
}

#[test]
fn planted_positive_row_decides_tool() {
    let p = common::planted(400, 21);
    let svc = service(&p);
    let (row, record) = p
        .data
        .rows
        .iter()
        .zip(p.data.store.records())
        .find(|(r, _)| r.tool_needed)
        .unwrap();
    let mut req = inline_request("s", 0, record);
    req.expected = Some(Expected::from_row(row));
    match svc.handle(&line(&req)) {
        Response::Event { event, .. } => {
            assert_eq!(event.internal.decision, ToolDecision::Tool);
            assert!(event.internal.p_tool >= 0.99, "{}", event.internal.p_tool);
            assert!(event.provisional);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn request_errors_carry_codes() {
    let p = common::planted(200, 22);
    let svc = service(&p);
    let record = &p.data.store.records()[0];
    let code = |resp: Response| match resp {
        Response::Error { error, .. } => error.code,
        other => panic!("expected error, got {other:?}"),
    };

    assert_eq!(code(svc.handle("{not json")), ErrorCode::Malformed);
    assert_eq!(code(svc.handle(&line(&inline_request("a", 1, record)))), ErrorCode::SessionOrder);

    let mut short = inline_request("a", 0, record);
    short.layers[0].vector = encode_vector(&[1.0, 2.0]);
    assert_eq!(code(svc.handle(&line(&short))), ErrorCode::BadVectorLength);

    let mut missing = inline_request("a", 0, record);
    missing.layers.pop();
    assert_eq!(code(svc.handle(&line(&missing))), ErrorCode::MissingLayer);

    let mut unknown = inline_request("a", 0, record);
    unknown.layers.clear();
    unknown.store_key = Some(toolwatch::StepKey::new("nope", 0));
    assert_eq!(code(svc.handle(&line(&unknown))), ErrorCode::UnknownStoreKey);

    // failed requests do not advance the session
    let mut by_key = inline_request("a", 0, record);
    by_key.layers.clear();
    by_key.store_key = Some(record.key());
    by_key.actual = Some(Actual::call("write_file"));
    assert!(matches!(svc.handle(&line(&by_key)), Response::Event { .. }));
    assert_eq!(code(svc.handle(&line(&by_key))), ErrorCode::SessionOrder);
}

fn session_requests(p: &common::Planted, session: &str, n: usize) -> Vec<String> {
    p.data
        .store
        .records()
        .iter()
        .zip(&p.data.rows)
        .take(n)
        .enumerate()
        .map(|(i, (rec, row))| {
            let mut r = inline_request(session, i as u32, rec);
            r.expected = Some(Expected::from_row(row));
            if i % 3 != 0 {
                r.actual = Some(if i % 2 == 0 { Actual::call("write_file") } else { Actual::no_call() });
            }
            line(&r)
        })
        .collect()
}

#[test]
fn replay_is_deterministic() {
    let p = common::planted(200, 23);
    let requests = session_requests(&p, "replay", 200);
    let first: Vec<String> = {
        let svc = service(&p);
        requests.iter().map(|r| svc.handle_line(r)).collect()
    };
    let second: Vec<String> = {
        let svc = service(&p);
        requests.iter().map(|r| svc.handle_line(r)).collect()
    };
    assert_eq!(first, second);
    assert!(first.iter().all(|r| r.contains("\"event\"")));
}

async fn client(addr: std::net::SocketAddr, requests: Vec<String>) -> Vec<String> {
    let stream = TcpStream::connect(addr).await.unwrap();
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let mut out = Vec::new();
    for r in requests {
        write.write_all(format!("{r}\n").as_bytes()).await.unwrap();
        out.push(lines.next_line().await.unwrap().unwrap());
        tokio::task::yield_now().await;
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interleaved_sessions_keep_their_order() {
    let p = common::planted(200, 24);
    let a = session_requests(&p, "alpha", 60);
    let b = session_requests(&p, "beta", 60);
    let expected_a: Vec<String> = {
        let svc = service(&p);
        a.iter().map(|r| svc.handle_line(r)).collect()
    };
    let expected_b: Vec<String> = {
        let svc = service(&p);
        b.iter().map(|r| svc.handle_line(r)).collect()
    };

    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let svc = Arc::new(service(&p));
    tokio::spawn(serve_listener(listener, svc));
    let (got_a, got_b) = tokio::join!(client(addr, a), client(addr, b));
    assert_eq!(got_a, expected_a);
    assert_eq!(got_b, expected_b);
}

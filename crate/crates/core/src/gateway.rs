//! HTTP/1.1 ingress turning requests into events for reactive atoms.
//!
//! Runtime introspection lives under `/_radon/`: `health`, `stats` and
//! `registry`.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Full, Limited};
use hyper::body::Incoming;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::engine::{Engine, EngineError};
use crate::model::{Event, MAX_PAYLOAD};

pub const DEFAULT_RESPONSE_TIMEOUT: Duration = Duration::from_secs(30);

/// Extra JSON merged into `/_radon/stats`.
pub type StatsSource = Arc<dyn Fn() -> serde_json::Value + Send + Sync>;

struct Shared {
    engine: Engine,
    response_timeout: Duration,
    stats: Option<StatsSource>,
}

pub struct Gateway {
    addr: SocketAddr,
    shutdown: watch::Sender<bool>,
}

impl Gateway {
    /// Serves `listener` until [`Gateway::shutdown`].
    pub fn start(
        listener: TcpListener,
        engine: Engine,
        response_timeout: Duration,
        stats: Option<StatsSource>,
    ) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let (shutdown, mut stop) = watch::channel(false);
        let shared = Arc::new(Shared {
            engine,
            response_timeout,
            stats,
        });
        tokio::spawn(async move {
            loop {
                let accepted = tokio::select! {
                    accepted = listener.accept() => accepted,
                    _ = stop.wait_for(|s| *s) => return,
                };
                let (stream, _) = match accepted {
                    Ok(conn) => conn,
                    Err(err) => {
                        tracing::warn!("gateway accept failed: {err}");
                        tokio::time::sleep(Duration::from_millis(20)).await;
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                let shared = shared.clone();
                tokio::spawn(async move {
                    let service = service_fn(move |req| {
                        let shared = shared.clone();
                        async move { Ok::<_, Infallible>(handle(&shared, req).await) }
                    });
                    let _ = http1::Builder::new()
                        .keep_alive(true)
                        .serve_connection(TokioIo::new(stream), service)
                        .await;
                });
            }
        });
        Ok(Self { addr, shutdown })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        self.shutdown.send_replace(true);
    }
}

fn reply(status: StatusCode, body: impl Into<Bytes>) -> Response<Full<Bytes>> {
    let mut response = Response::new(Full::new(body.into()));
    *response.status_mut() = status;
    response
}

fn json(value: &impl serde::Serialize) -> Response<Full<Bytes>> {
    let mut response = reply(
        StatusCode::OK,
        serde_json::to_vec(value).expect("serializable"),
    );
    response
        .headers_mut()
        .insert("content-type", "application/json".parse().unwrap());
    response
}

fn admin(shared: &Shared, path: &str) -> Response<Full<Bytes>> {
    let engine = &shared.engine;
    match path {
        "/_radon/health" => reply(StatusCode::OK, "ok"),
        "/_radon/stats" => {
            let mut value = serde_json::json!({
                "node": engine.node().as_str(),
                "engine": engine.stats(),
                "messaging": engine.messaging().stats(),
                "daemons": engine.daemons().len(),
            });
            if let Some(extra) = &shared.stats {
                if let (Some(map), serde_json::Value::Object(more)) = (value.as_object_mut(), extra()) {
                    map.extend(more);
                }
            }
            json(&value)
        }
        "/_radon/registry" => {
            let snapshot = engine.naming().snapshot();
            json(&serde_json::json!({
                "digest": format!("{:016x}", snapshot.digest()),
                "snapshot": snapshot,
            }))
        }
        _ => reply(StatusCode::NOT_FOUND, "unknown admin endpoint"),
    }
}

async fn handle(shared: &Shared, req: Request<Incoming>) -> Response<Full<Bytes>> {
    let method = req.method().as_str().to_string();
    let path = req
        .uri()
        .path_and_query()
        .map_or_else(|| req.uri().path().to_string(), |pq| pq.as_str().to_string());
    if req.uri().path().starts_with("/_radon/") {
        return admin(shared, req.uri().path());
    }
    let Some(definition) = shared.engine.match_route(&method, req.uri().path()) else {
        return reply(StatusCode::NOT_FOUND, "no route");
    };
    let headers = req
        .headers()
        .iter()
        .map(|(k, v)| (k.as_str().to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    let body = match Limited::new(req.into_body(), MAX_PAYLOAD).collect().await {
        Ok(collected) => collected.to_bytes(),
        Err(_) => return reply(StatusCode::PAYLOAD_TOO_LARGE, "body too large"),
    };
    let event = Event {
        id: 0,
        method,
        path,
        headers,
        body,
    };
    let ticket = match shared.engine.dispatch_event(&definition, event) {
        Ok(ticket) => ticket,
        Err(EngineError::Overloaded(_)) | Err(EngineError::Stopped) => {
            return reply(StatusCode::SERVICE_UNAVAILABLE, "unavailable")
        }
        Err(err) => return reply(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()),
    };
    match tokio::time::timeout(shared.response_timeout, ticket.response).await {
        Ok(Ok(response)) => {
            let status = StatusCode::from_u16(response.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            reply(status, response.body)
        }
        Ok(Err(_)) => reply(StatusCode::INTERNAL_SERVER_ERROR, "atom fault"),
        Err(_) => reply(StatusCode::GATEWAY_TIMEOUT, "response timeout"),
    }
}

//! Baseline servers: a native HTTP echo server and the Radon echo
//! deployment.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response};
use hyper_util::rt::TokioIo;
use radon_core::model::{AtomConfiguration, EventRoute, SchedulingPolicy};
use tokio::net::TcpListener;
use tokio::sync::watch;

/// Answers every request with status 200 and the request body.
pub struct EchoServer {
    addr: SocketAddr,
    stop: watch::Sender<bool>,
}

async fn echo(req: Request<Incoming>) -> Result<Response<Full<Bytes>>, Infallible> {
    let body = match req.into_body().collect().await {
        Ok(collected) => collected.to_bytes(),
        Err(_) => Bytes::new(),
    };
    Ok(Response::new(Full::new(body)))
}

impl EchoServer {
    pub fn start(listener: TcpListener) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let (stop, mut stopped) = watch::channel(false);
        tokio::spawn(async move {
            loop {
                let accepted = tokio::select! {
                    accepted = listener.accept() => accepted,
                    _ = stopped.wait_for(|s| *s) => return,
                };
                let Ok((stream, _)) = accepted else {
                    tokio::time::sleep(Duration::from_millis(10)).await;
                    continue;
                };
                let _ = stream.set_nodelay(true);
                tokio::spawn(async move {
                    let _ = http1::Builder::new()
                        .keep_alive(true)
                        .serve_connection(TokioIo::new(stream), service_fn(echo))
                        .await;
                });
            }
        });
        Ok(Self { addr, stop })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        self.stop.send_replace(true);
    }
}

pub const RADON_ECHO_IDLE: Duration = Duration::from_secs(5);

/// The reactive echo atom bound to the benchmark and echo routes.
pub fn radon_echo_application() -> Vec<AtomConfiguration> {
    vec![AtomConfiguration::reactive(
        "echo",
        SchedulingPolicy::OnDemandExpire {
            idle_timeout: Some(RADON_ECHO_IDLE),
            max_events: None,
        },
        vec![
            EventRoute::new("PUT", "/kv"),
            EventRoute::new("GET", "/kv"),
            EventRoute::new("POST", "/echo"),
        ],
    )]
}

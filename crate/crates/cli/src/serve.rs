//! WebSocket service streaming simulation frames and accepting live targets.
//!
//! The simulation runs on its own thread at a fixed frame rate. Clients write
//! targets into a last-writer-wins cell that the loop reads once per tick, and
//! frames go out through a bounded broadcast channel, so a slow or absent
//! client never blocks the simulation; lagging clients skip frames.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Context;
use diffloco_core::objectives::{Goal, GoalBounds};
use diffloco_core::protocol::{ClientMessage, ServerMessage};
use diffloco_core::session::{merge_command, Session, FRAME_RATE};
use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, watch};
use tokio_tungstenite::tungstenite::Message;

/// Frames buffered per client before it starts skipping.
const FRAME_BUFFER: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Wall-clock time between frames.
    pub frame_interval: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            frame_interval: Duration::from_secs_f64(1.0 / FRAME_RATE),
        }
    }
}

/// A running server; dropping it stops the simulation thread.
pub struct Server {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    frames: Arc<AtomicU64>,
    sim: Option<thread::JoinHandle<()>>,
    accept: tokio::task::JoinHandle<()>,
}

impl Server {
    /// Frames produced so far, whether or not anyone received them.
    pub fn frames_produced(&self) -> u64 {
        self.frames.load(Ordering::Relaxed)
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.accept.abort();
        if let Some(h) = self.sim.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_now();
    }
}

#[derive(Clone)]
struct Shared {
    hello: ServerMessage,
    bounds: GoalBounds,
    targets: watch::Sender<Goal>,
    frames: broadcast::Sender<Arc<str>>,
}

/// Binds `addr` and starts the simulation loop and the accept loop. Must be
/// called inside a tokio runtime.
pub async fn start(session: Session, addr: SocketAddr, opts: ServeOptions) -> anyhow::Result<Server> {
    let listener = TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    let addr = listener.local_addr()?;
    let (targets, targets_rx) = watch::channel(session.targets());
    let (frames_tx, _) = broadcast::channel(FRAME_BUFFER);
    let shared = Shared {
        hello: session.hello(),
        bounds: session.bounds().clone(),
        targets,
        frames: frames_tx.clone(),
    };
    let stop = Arc::new(AtomicBool::new(false));
    let frames = Arc::new(AtomicU64::new(0));
    let sim = {
        let stop = stop.clone();
        let frames = frames.clone();
        thread::Builder::new()
            .name("diffloco-sim".into())
            .spawn(move || sim_loop(session, targets_rx, frames_tx, stop, frames, opts))?
    };
    let accept = tokio::spawn(async move {
        loop {
            match listener.accept().await {
                Ok((stream, peer)) => {
                    let shared = shared.clone();
                    tokio::spawn(async move {
                        if let Err(e) = client(stream, shared).await {
                            log::debug!("client {peer}: {e:#}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    });
    log::info!("serving on ws://{addr}");
    Ok(Server {
        addr,
        stop,
        frames,
        sim: Some(sim),
        accept,
    })
}

fn sim_loop(
    mut session: Session,
    targets: watch::Receiver<Goal>,
    out: broadcast::Sender<Arc<str>>,
    stop: Arc<AtomicBool>,
    count: Arc<AtomicU64>,
    opts: ServeOptions,
) {
    let mut next = Instant::now();
    while !stop.load(Ordering::Relaxed) {
        let wanted = *targets.borrow();
        if wanted != session.commanded() {
            session.set_commanded(wanted);
        }
        let msg = match session.tick() {
            Ok(frame) => ServerMessage::Frame(frame),
            Err(e) => {
                log::warn!("simulation reset: {e}");
                ServerMessage::Error { msg: format!("simulation reset: {e}") }
            }
        };
        count.fetch_add(1, Ordering::Relaxed);
        // no receivers is fine: the frame is dropped
        let _ = out.send(Arc::from(msg.to_json()));
        next += opts.frame_interval;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            next = now;
        }
    }
}

async fn client(stream: TcpStream, shared: Shared) -> anyhow::Result<()> {
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let (mut tx, mut rx) = ws.split();
    let mut frames = shared.frames.subscribe();
    let mut hello = shared.hello.clone();
    if let ServerMessage::Hello(h) = &mut hello {
        h.targets = *shared.targets.borrow();
    }
    tx.send(Message::text(hello.to_json())).await?;
    loop {
        tokio::select! {
            incoming = rx.next() => {
                let text = match incoming {
                    None => return Ok(()),
                    Some(Err(e)) => return Err(e.into()),
                    Some(Ok(Message::Close(_))) => return Ok(()),
                    Some(Ok(Message::Text(t))) => t.as_str().to_owned(),
                    Some(Ok(Message::Binary(_))) => {
                        let err = ServerMessage::Error { msg: "binary messages are not supported".into() };
                        tx.send(Message::text(err.to_json())).await?;
                        continue;
                    }
                    Some(Ok(_)) => continue,
                };
                match ClientMessage::parse(&text) {
                    Ok(cmd) => {
                        shared.targets.send_modify(|g| *g = merge_command(&shared.bounds, g, &cmd));
                    }
                    Err(msg) => tx.send(Message::text(ServerMessage::Error { msg }.to_json())).await?,
                }
            }
            frame = frames.recv() => match frame {
                Ok(json) => tx.send(Message::text(json.to_string())).await?,
                Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("client skipped {n} frames"),
                Err(broadcast::error::RecvError::Closed) => return Ok(()),
            },
        }
    }
}

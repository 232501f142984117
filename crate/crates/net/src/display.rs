//! Display node runtime: a control connection, one data connection per
//! source endpoint, a presentation timer and heartbeats.

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::time::Duration;

use log::{debug, info, warn};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, watch};

use tilewall::display::{DisplayEffect, DisplayNode};
use tilewall::protocol::{Capabilities, Heartbeat, Message, Register, Role, Subscribe, Unsubscribe};

use crate::conn::{spawn_writer, FramedReader, Outbound};
use crate::{now_us, NetError};

#[derive(Debug, Clone)]
pub struct DisplayRuntimeConfig {
    pub control: String,
    pub heartbeat_every: Duration,
    /// Writes `tile_<col>_<row>.ppm` here whenever a new scene revision has
    /// been drawn.
    pub dump_dir: Option<PathBuf>,
}

impl DisplayRuntimeConfig {
    pub fn new(control: impl Into<String>) -> Self {
        DisplayRuntimeConfig {
            control: control.into(),
            heartbeat_every: Duration::from_secs(1),
            dump_dir: None,
        }
    }
}

/// Scene revision currently applied by a running display.
pub type RevisionWatch = watch::Receiver<u64>;

/// Runs until `shutdown` resolves or control closes the session; returns the
/// node for inspection.
pub async fn run_display(
    mut node: DisplayNode,
    config: DisplayRuntimeConfig,
    revision: Option<watch::Sender<u64>>,
    shutdown: impl Future<Output = ()>,
) -> Result<DisplayNode, NetError> {
    let tile = node.tile();
    let stream = TcpStream::connect(&config.control).await?;
    let _ = stream.set_nodelay(true);
    let (r, w) = stream.into_split();
    let mut control_rx = FramedReader::new(r);
    let (control_tx, out_rx) = mpsc::unbounded_channel();
    let control_writer = spawn_writer(w, out_rx);
    let register = Register {
        role: Role::Display,
        tile: Some(tile),
        name: None,
        capabilities: Capabilities::default(),
    };
    let _ = control_tx.send(Outbound::Msg(Message::Register(register), None));

    let (data_tx, mut data_rx) = mpsc::unbounded_channel::<(String, Option<(u64, Message)>)>();
    let mut sources: HashMap<String, mpsc::UnboundedSender<Outbound>> = HashMap::new();
    let mut heartbeat = tokio::time::interval(config.heartbeat_every);
    let mut registered = false;
    let mut dumped_revision = None;
    tokio::pin!(shutdown);

    loop {
        let deadline = node.next_deadline().map(|d| {
            let wait = (d as i64 - now_us()).max(0) as u64;
            tokio::time::Instant::now() + Duration::from_micros(wait)
        });
        tokio::select! {
            _ = &mut shutdown => break,
            msg = control_rx.next() => match msg? {
                None => {
                    info!("{tile}: control closed the session");
                    break;
                }
                Some((_, msg)) => match msg {
                    Message::Ack(_) if !registered => registered = true,
                    Message::Nack(n) if !registered => {
                        return Err(NetError::Refused { code: n.code, message: n.message });
                    }
                    Message::SceneSnapshot(snap) => match node.apply_scene(&snap) {
                        Ok(effects) => {
                            for e in effects {
                                route(tile, e, &mut sources, &data_tx).await;
                            }
                            if let Some(tx) = &revision {
                                let _ = tx.send(node.revision());
                            }
                        }
                        Err(e) => debug!("{tile}: {e}"),
                    },
                    Message::Heartbeat(hb) => node.on_heartbeat_reply(&hb, now_us()),
                    Message::SnapshotReq(req) => {
                        let rsp = node.snapshot(req.mode);
                        let _ = control_tx.send(Outbound::Msg(Message::SnapshotRsp(rsp), None));
                    }
                    other => debug!("{tile}: ignoring {:?}", other.msg_type()),
                },
            },
            data = data_rx.recv() => {
                let Some((addr, item)) = data else { continue };
                match item {
                    Some((seq, Message::Frame(frame))) => {
                        if let Err(e) = node.ingest_frame(frame, seq, now_us().max(0) as u64) {
                            warn!("{tile}: frame from {addr}: {e}");
                        }
                    }
                    Some((_, Message::Nack(n))) => warn!("{tile}: {addr} refused: {} {}", n.code, n.message),
                    Some(_) => {}
                    None => {
                        debug!("{tile}: data connection to {addr} closed");
                        sources.remove(&addr);
                    }
                }
            }
            _ = async { tokio::time::sleep_until(deadline.unwrap()).await }, if deadline.is_some() => {
                node.tick(now_us().max(0) as u64);
            }
            _ = heartbeat.tick() => {
                let hb = Heartbeat { t1: now_us(), t2: None, t3: None };
                let _ = control_tx.send(Outbound::Msg(Message::Heartbeat(hb), None));
            }
        }
        if let Some(dir) = &config.dump_dir {
            if dumped_revision != Some(node.revision()) && node.revision() > 0 {
                dumped_revision = Some(node.revision());
                let path = dir.join(format!("tile_{}_{}.ppm", tile.col, tile.row));
                if let Err(e) = std::fs::write(&path, node.framebuffer().to_ppm()) {
                    warn!("{tile}: {}: {e}", path.display());
                }
            }
        }
    }
    let _ = control_tx.send(Outbound::Close);
    for (_, tx) in sources.drain() {
        let _ = tx.send(Outbound::Close);
    }
    let _ = control_writer.await;
    Ok(node)
}

type DataEvents = mpsc::UnboundedSender<(String, Option<(u64, Message)>)>;

async fn route(
    tile: tilewall::geometry::TileId,
    effect: DisplayEffect,
    sources: &mut HashMap<String, mpsc::UnboundedSender<Outbound>>,
    events: &DataEvents,
) {
    let (endpoint, msg) = match effect {
        DisplayEffect::Subscribe { endpoint, rect } => {
            let msg = Message::Subscribe(Subscribe {
                content_id: endpoint.content_id,
                rect,
            });
            (endpoint, msg)
        }
        DisplayEffect::Unsubscribe { endpoint } => {
            let msg = Message::Unsubscribe(Unsubscribe {
                content_id: endpoint.content_id,
            });
            (endpoint, msg)
        }
    };
    let Some(addr) = endpoint.data_addr.clone() else {
        warn!("{tile}: {} has no data address", endpoint.content_id);
        return;
    };
    if !sources.contains_key(&addr) {
        if matches!(msg, Message::Unsubscribe(_)) {
            return;
        }
        match connect_source(&addr, events.clone()).await {
            Ok(tx) => {
                sources.insert(addr.clone(), tx);
            }
            Err(e) => {
                warn!("{tile}: cannot reach {addr}: {e}");
                return;
            }
        }
    }
    let _ = sources[&addr].send(Outbound::Msg(msg, None));
}

async fn connect_source(addr: &str, events: DataEvents) -> Result<mpsc::UnboundedSender<Outbound>, NetError> {
    let stream = TcpStream::connect(addr).await?;
    let _ = stream.set_nodelay(true);
    let (r, w) = stream.into_split();
    let (tx, rx) = mpsc::unbounded_channel();
    spawn_writer(w, rx);
    let addr = addr.to_string();
    tokio::spawn(async move {
        let mut reader = FramedReader::new(r);
        loop {
            match reader.next().await {
                Ok(Some(item)) => {
                    if events.send((addr.clone(), Some(item))).is_err() {
                        return;
                    }
                }
                Ok(None) | Err(_) => break,
            }
        }
        let _ = events.send((addr, None));
    });
    Ok(tx)
}

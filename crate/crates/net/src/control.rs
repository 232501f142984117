//! Control service runtime: one actor owns the [`ControlService`]; every
//! TCP or WebSocket connection is a session feeding it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use log::{debug, info, warn};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use tilewall::control::{ControlEffect, ControlService, SessionId};
use tilewall::protocol::{Capabilities, Message, Register, Role};

use crate::conn::{spawn_writer, FramedReader, Outbound};
use crate::ui::UiMessage;
use crate::{now_us, NetError};

#[derive(Debug, Clone)]
pub struct ControlRuntimeConfig {
    /// How often nodes that stopped heartbeating are looked for.
    pub sweep_every: Duration,
}

impl Default for ControlRuntimeConfig {
    fn default() -> Self {
        ControlRuntimeConfig {
            sweep_every: Duration::from_secs(1),
        }
    }
}

enum Input {
    Connected(SessionId, mpsc::UnboundedSender<Outbound>),
    Message(SessionId, Message),
    Disconnected(SessionId),
}

pub struct ControlHandle {
    stop: Option<oneshot::Sender<()>>,
    actor: JoinHandle<ControlService>,
    accept: Vec<JoinHandle<()>>,
}

impl ControlHandle {
    /// Stops accepting, closes every session and returns the service.
    pub async fn shutdown(mut self) -> ControlService {
        for a in &self.accept {
            a.abort();
        }
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.actor.await.expect("control actor panicked")
    }
}

/// Serves the wall protocol on `proto` and, if given, the UI WebSocket
/// endpoint on `ui`.
pub fn spawn_control(
    service: ControlService,
    proto: TcpListener,
    ui: Option<TcpListener>,
    config: ControlRuntimeConfig,
) -> ControlHandle {
    let (tx, rx) = mpsc::unbounded_channel();
    let (stop_tx, stop_rx) = oneshot::channel();
    let ids = Arc::new(AtomicU64::new(1));
    let mut accept = vec![tokio::spawn(accept_proto(proto, tx.clone(), ids.clone()))];
    if let Some(ui) = ui {
        accept.push(tokio::spawn(accept_ui(ui, tx.clone(), ids)));
    }
    drop(tx);
    let actor = tokio::spawn(run_actor(service, rx, stop_rx, config));
    ControlHandle {
        stop: Some(stop_tx),
        actor,
        accept,
    }
}

async fn run_actor(
    mut service: ControlService,
    mut rx: mpsc::UnboundedReceiver<Input>,
    mut stop: oneshot::Receiver<()>,
    config: ControlRuntimeConfig,
) -> ControlService {
    let mut outbound: HashMap<SessionId, mpsc::UnboundedSender<Outbound>> = HashMap::new();
    let mut sweep = tokio::time::interval(config.sweep_every);
    sweep.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        let effects = tokio::select! {
            _ = &mut stop => break,
            _ = sweep.tick() => service.liveness_sweep(now_us() as u64),
            input = rx.recv() => match input {
                None => break,
                Some(Input::Connected(sid, tx)) => {
                    service.connect(sid, now_us() as u64);
                    outbound.insert(sid, tx);
                    Vec::new()
                }
                Some(Input::Message(sid, msg)) => service.handle(sid, msg, now_us() as u64),
                Some(Input::Disconnected(sid)) => {
                    outbound.remove(&sid);
                    service.disconnected(sid, now_us() as u64)
                }
            },
        };
        for e in effects {
            match e {
                ControlEffect::Send(sid, msg) => {
                    if let Some(tx) = outbound.get(&sid) {
                        let _ = tx.send(Outbound::Msg(msg, None));
                    }
                }
                ControlEffect::Close(sid) => {
                    if let Some(tx) = outbound.remove(&sid) {
                        let _ = tx.send(Outbound::Close);
                    }
                }
            }
        }
    }
    for (_, tx) in outbound.drain() {
        let _ = tx.send(Outbound::Close);
    }
    service
}

async fn accept_proto(listener: TcpListener, tx: mpsc::UnboundedSender<Input>, ids: Arc<AtomicU64>) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                warn!("accept: {e}");
                continue;
            }
        };
        let sid = ids.fetch_add(1, Ordering::Relaxed);
        debug!("session {sid} from {peer}");
        tokio::spawn(serve_proto(stream, sid, tx.clone()));
    }
}

async fn serve_proto(stream: TcpStream, sid: SessionId, tx: mpsc::UnboundedSender<Input>) {
    let _ = stream.set_nodelay(true);
    let (r, w) = stream.into_split();
    let (out_tx, out_rx) = mpsc::unbounded_channel();
    let writer = spawn_writer(w, out_rx);
    if tx.send(Input::Connected(sid, out_tx)).is_err() {
        return;
    }
    let mut reader = FramedReader::new(r);
    loop {
        match reader.next().await {
            Ok(Some((_, msg))) => {
                if tx.send(Input::Message(sid, msg)).is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                info!("session {sid}: {e}");
                break;
            }
        }
    }
    let _ = tx.send(Input::Disconnected(sid));
    let _ = writer.await;
}

async fn accept_ui(listener: TcpListener, tx: mpsc::UnboundedSender<Input>, ids: Arc<AtomicU64>) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                warn!("accept: {e}");
                continue;
            }
        };
        let sid = ids.fetch_add(1, Ordering::Relaxed);
        debug!("ui session {sid} from {peer}");
        let tx = tx.clone();
        tokio::spawn(async move {
            if let Err(e) = serve_ui(stream, sid, tx).await {
                info!("ui session {sid}: {e}");
            }
        });
    }
}

async fn serve_ui(stream: TcpStream, sid: SessionId, tx: mpsc::UnboundedSender<Input>) -> Result<(), NetError> {
    let ws = tokio_tungstenite::accept_async(stream)
        .await
        .map_err(|e| NetError::WebSocket(e.to_string()))?;
    let (mut sink, mut source) = ws.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Outbound>();
    let local = out_tx.clone();
    if tx.send(Input::Connected(sid, out_tx)).is_err() {
        return Ok(());
    }
    // a WebSocket peer is a UI by construction
    let register = Register {
        role: Role::Ui,
        tile: None,
        name: None,
        capabilities: Capabilities::default(),
    };
    let _ = tx.send(Input::Message(sid, Message::Register(register)));

    let writer = tokio::spawn(async move {
        while let Some(out) = out_rx.recv().await {
            let text = match out {
                Outbound::Msg(msg, _) => match UiMessage::from_message(msg) {
                    Some(m) => m.to_json(),
                    None => continue,
                },
                Outbound::Close => break,
            };
            if sink.send(WsMessage::Text(text)).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });

    while let Some(frame) = source.next().await {
        let text = match frame {
            Ok(WsMessage::Text(t)) => t,
            Ok(WsMessage::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        match UiMessage::parse(&text).map(UiMessage::into_request) {
            Ok(Some(msg)) => {
                if tx.send(Input::Message(sid, msg)).is_err() {
                    break;
                }
            }
            Ok(None) => {
                let _ = local.send(Outbound::Msg(
                    Message::Nack(tilewall::protocol::Nack {
                        command_id: 0,
                        code: "Protocol".into(),
                        message: "UIs may only send command and snapshot_req".into(),
                    }),
                    None,
                ));
            }
            Err(e) => {
                warn!("ui session {sid}: {e}");
                let _ = local.send(Outbound::Msg(
                    Message::Nack(tilewall::protocol::Nack {
                        command_id: 0,
                        code: "Payload".into(),
                        message: e,
                    }),
                    None,
                ));
            }
        }
    }
    let _ = tx.send(Input::Disconnected(sid));
    drop(local);
    let _ = writer.await;
    Ok(())
}

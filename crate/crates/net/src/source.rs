//! Source runtime: registers with control, serves subscribing displays on
//! its own data listener and paces frame production.

use std::collections::HashMap;
use std::future::Future;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use tilewall::protocol::Message;
use tilewall::source::{Pacer, PacingConfig, SourceClient, SourceEffect, SourceError, SourceState, SubscriberId};

use crate::conn::{spawn_writer, FramedReader, Outbound};
use crate::{now_us, NetError};

#[derive(Debug, Clone)]
pub struct SourceRuntimeConfig {
    pub control: String,
    /// Frame rate for streamers; `None` for a sender pushing one still.
    pub fps: Option<u32>,
    pub heartbeat_every: Duration,
}

pub struct SourceOutcome {
    /// 0 after a clean end of stream, otherwise the client's error code.
    pub exit_code: i32,
    pub error: Option<SourceError>,
    pub client: SourceClient,
}

enum DataEvent {
    Message(SubscriberId, Message),
    Closed(SubscriberId),
}

/// Runs until the provider is exhausted, control refuses or drops us, or
/// `shutdown` resolves (which unpublishes first).
pub async fn run_source(
    mut client: SourceClient,
    data: TcpListener,
    config: SourceRuntimeConfig,
    shutdown: impl Future<Output = ()>,
) -> Result<SourceOutcome, NetError> {
    let pacing = config.fps.map(PacingConfig::new).transpose().map_err(|e| NetError::Refused {
        code: "Validation".into(),
        message: e.to_string(),
    })?;
    let stream = TcpStream::connect(&config.control).await?;
    let _ = stream.set_nodelay(true);
    let (r, w) = stream.into_split();
    let mut control_rx = FramedReader::new(r);
    let (control_tx, out_rx) = mpsc::unbounded_channel();
    let control_writer = spawn_writer(w, out_rx);
    let _ = control_tx.send(Outbound::Msg(client.register(), None));

    let (data_tx, mut data_rx) = mpsc::unbounded_channel();
    let mut subscribers: HashMap<SubscriberId, mpsc::UnboundedSender<Outbound>> = HashMap::new();
    let mut next_subscriber: SubscriberId = 1;
    let epoch = Instant::now();
    let mono_ns = move || epoch.elapsed().as_nanos() as u64;
    let mut pacer: Option<Pacer> = None;
    let mut scheduled: Option<tokio::time::Instant> = None;
    let mut heartbeat = tokio::time::interval(config.heartbeat_every);
    let mut outcome: Option<(i32, Option<SourceError>)> = None;
    tokio::pin!(shutdown);

    while outcome.is_none() {
        let effects = tokio::select! {
            _ = &mut shutdown => {
                let fx = client.unpublish();
                outcome = Some((0, None));
                fx
            }
            msg = control_rx.next() => match msg? {
                None => {
                    info!("control closed the session");
                    outcome = Some((3, None));
                    Vec::new()
                }
                Some((_, msg)) => {
                    let was = client.state();
                    match client.on_control(msg, now_us()) {
                        Ok(mut fx) => {
                            if was == SourceState::Registering && client.state() == SourceState::Offering {
                                match pacing {
                                    Some(p) => {
                                        let mut pc = Pacer::new(p, mono_ns());
                                        scheduled = Some(at(epoch, pc.next_tick(mono_ns()).at_ns));
                                        pacer = Some(pc);
                                    }
                                    // load the still so subscribers are served at once
                                    None => match client.produce(now_us().max(0) as u64) {
                                        Ok(more) => fx.extend(more),
                                        Err(e) => outcome = Some((e.exit_code(), Some(e))),
                                    },
                                }
                            }
                            fx
                        }
                        Err(e) => {
                            warn!("{e}");
                            outcome = Some((e.exit_code(), Some(e)));
                            Vec::new()
                        }
                    }
                }
            },
            conn = data.accept() => {
                match conn {
                    Ok((stream, peer)) => {
                        let id = next_subscriber;
                        next_subscriber += 1;
                        debug!("subscriber {id} from {peer}");
                        subscribers.insert(id, serve_subscriber(stream, id, data_tx.clone()));
                    }
                    Err(e) => warn!("accept: {e}"),
                }
                Vec::new()
            }
            event = data_rx.recv() => match event {
                Some(DataEvent::Message(id, Message::Subscribe(sub))) => client.on_subscribe(id, sub, now_us().max(0) as u64),
                Some(DataEvent::Message(id, Message::Unsubscribe(_))) | Some(DataEvent::Closed(id)) => {
                    client.on_unsubscribe(id);
                    subscribers.remove(&id);
                    Vec::new()
                }
                _ => Vec::new(),
            },
            _ = async { tokio::time::sleep_until(scheduled.unwrap()).await }, if scheduled.is_some() => {
                if let Some(p) = pacer.as_mut() {
                    scheduled = Some(at(epoch, p.next_tick(mono_ns()).at_ns));
                }
                match client.produce(now_us().max(0) as u64) {
                    Ok(fx) => fx,
                    Err(e) => {
                        outcome = Some((e.exit_code(), Some(e)));
                        Vec::new()
                    }
                }
            }
            _ = heartbeat.tick() => {
                if client.state() == SourceState::Offering {
                    let _ = control_tx.send(Outbound::Msg(client.heartbeat(now_us()), None));
                }
                Vec::new()
            }
        };
        for e in effects {
            match e {
                SourceEffect::Control(msg) => {
                    let _ = control_tx.send(Outbound::Msg(msg, None));
                }
                SourceEffect::Data { to, seq, msg } => {
                    if let Some(tx) = subscribers.get(&to) {
                        let _ = tx.send(Outbound::Msg(msg, seq));
                    }
                }
            }
        }
        if outcome.is_none() && client.state() == SourceState::Ended {
            outcome = Some((0, None));
        }
    }
    for (_, tx) in subscribers.drain() {
        let _ = tx.send(Outbound::Close);
    }
    let _ = control_tx.send(Outbound::Close);
    let _ = control_writer.await;
    let (exit_code, error) = outcome.expect("loop exits with an outcome");
    Ok(SourceOutcome {
        exit_code,
        error,
        client,
    })
}

fn at(epoch: Instant, ns: u64) -> tokio::time::Instant {
    tokio::time::Instant::from_std(epoch + Duration::from_nanos(ns))
}

fn serve_subscriber(
    stream: TcpStream,
    id: SubscriberId,
    events: mpsc::UnboundedSender<DataEvent>,
) -> mpsc::UnboundedSender<Outbound> {
    let _ = stream.set_nodelay(true);
    let (r, w) = stream.into_split();
    let (tx, rx) = mpsc::unbounded_channel();
    spawn_writer(w, rx);
    tokio::spawn(async move {
        let mut reader = FramedReader::new(r);
        while let Ok(Some((_, msg))) = reader.next().await {
            if events.send(DataEvent::Message(id, msg)).is_err() {
                return;
            }
        }
        let _ = events.send(DataEvent::Closed(id));
    });
    tx
}

use std::collections::BTreeMap;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{oneshot, watch};
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use tilewall::control::{ControlService, EnvStore, SlotConfig};
use tilewall::display::DisplayNode;
use tilewall::geometry::{build_wall, Bezels, GeometryMode, MmSize, PxSize, TileGrid, TileId, WallConfig};
use tilewall::protocol::{Command, CommandOp, Role, SnapshotMode, SnapshotReq};
use tilewall::raster::Pattern;
use tilewall::scene::{ContentId, PlacementId};
use tilewall::source::{FrameProvider, SourceClient, SourceConfig};
use tilewall_net::control::ControlRuntimeConfig;
use tilewall_net::source::SourceOutcome;
use tilewall_net::{run_display, run_source, spawn_control, DisplayRuntimeConfig, SourceRuntimeConfig, UiMessage};

const WAIT: Duration = Duration::from_secs(10);

fn small_wall() -> TileGrid {
    build_wall(&WallConfig {
        cols: 2,
        rows: 1,
        tile_px: PxSize { w: 64, h: 32 },
        visible_mm: MmSize { w: 64.0, h: 32.0 },
        bezels_mm: Bezels::default(),
        mode: GeometryMode::PixelContiguous,
    })
    .unwrap()
}

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct Wall {
    proto: String,
    ui: String,
    control: tilewall_net::ControlHandle,
    displays: Vec<(oneshot::Sender<()>, tokio::task::JoinHandle<DisplayNode>, watch::Receiver<u64>)>,
}

async fn start_wall(slots: usize) -> Wall {
    let grid = small_wall();
    let service = ControlService::new(grid.clone(), SlotConfig::new(slots).unwrap(), EnvStore::memory());
    let proto = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let ui = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let proto_addr = proto.local_addr().unwrap().to_string();
    let ui_addr = ui.local_addr().unwrap().to_string();
    let control = spawn_control(service, proto, Some(ui), ControlRuntimeConfig::default());
    let mut displays = Vec::new();
    for tile in grid.tiles() {
        let node = DisplayNode::new(grid.clone(), tile, None);
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let (rev_tx, rev_rx) = watch::channel(0);
        let cfg = DisplayRuntimeConfig::new(proto_addr.clone());
        let handle = tokio::spawn(async move {
            run_display(node, cfg, Some(rev_tx), async {
                let _ = stop_rx.await;
            })
            .await
            .unwrap()
        });
        displays.push((stop_tx, handle, rev_rx));
    }
    Wall {
        proto: proto_addr,
        ui: ui_addr,
        control,
        displays,
    }
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn ui_connect(addr: &str) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap();
    ws
}

async fn ui_send(ws: &mut Ws, msg: &UiMessage) {
    ws.send(WsMessage::Text(msg.to_json())).await.unwrap();
}

/// Next UI message matching `f`, skipping the rest.
async fn ui_expect<T>(ws: &mut Ws, mut f: impl FnMut(UiMessage) -> Option<T>) -> T {
    timeout(WAIT, async {
        loop {
            let frame = ws.next().await.expect("ui stream ended").unwrap();
            if let WsMessage::Text(t) = frame {
                if let Some(v) = f(UiMessage::parse(&t).unwrap()) {
                    return v;
                }
            }
        }
    })
    .await
    .expect("timed out waiting for ui message")
}

async fn start_source(
    proto: &str,
    name: &str,
    role: Role,
    provider: FrameProvider,
    fps: Option<u32>,
) -> (oneshot::Sender<()>, tokio::task::JoinHandle<SourceOutcome>) {
    let data = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let mut cfg = SourceConfig::new(name, role);
    cfg.data_addr = Some(data.local_addr().unwrap().to_string());
    let client = SourceClient::new(cfg, provider).unwrap();
    let rt = SourceRuntimeConfig {
        control: proto.to_string(),
        fps,
        heartbeat_every: Duration::from_millis(200),
    };
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        run_source(client, data, rt, async {
            let _ = stop_rx.await;
        })
        .await
        .unwrap()
    });
    (stop_tx, handle)
}

async fn digests(ws: &mut Ws, tiles: usize) -> BTreeMap<TileId, (u64, String)> {
    ui_send(ws, &UiMessage::SnapshotReq(SnapshotReq { mode: SnapshotMode::Digest })).await;
    let mut out = BTreeMap::new();
    while out.len() < tiles {
        let (t, r, d) = ui_expect(ws, |m| match m {
            UiMessage::SnapshotRsp(r) => Some((r.tile, r.revision, r.digest)),
            _ => None,
        })
        .await;
        out.insert(t, (r, d));
    }
    out
}

async fn stop_wall(wall: Wall) -> Vec<DisplayNode> {
    let mut nodes = Vec::new();
    for (stop, handle, _) in wall.displays {
        let _ = stop.send(());
        nodes.push(timeout(WAIT, handle).await.unwrap().unwrap());
    }
    wall.control.shutdown().await;
    nodes
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sender_still_reaches_every_tile_over_tcp() {
    let wall = start_wall(12).await;
    let mut ui = ui_connect(&wall.ui).await;
    // registration ACK for the UI session itself
    ui_expect(&mut ui, |m| matches!(m, UiMessage::Ack(_)).then_some(())).await;

    let image = Pattern::Unique.render(128, 32, 0);
    let (stop_src, src) = start_source(&wall.proto, "cam", Role::Sender, FrameProvider::still(image.clone()), None).await;
    let content = ui_expect(&mut ui, |m| match m {
        UiMessage::SourceOffer(o) if o.name == "cam" => Some(o.content_id),
        _ => None,
    })
    .await;

    ui_send(
        &mut ui,
        &UiMessage::Command(Command {
            command_id: 1,
            op: CommandOp::Place {
                content,
                x: 0.0,
                y: 0.0,
                scale: 1.0,
                rotation_deg: 0.0,
            },
        }),
    )
    .await;
    let placement = ui_expect(&mut ui, |m| match m {
        UiMessage::Ack(a) if a.command_id == 1 => Some(a.placement_id.expect("placement id")),
        UiMessage::Nack(n) if n.command_id == 1 => panic!("place refused: {n:?}"),
        _ => None,
    })
    .await;
    assert_eq!(placement, PlacementId(1));

    let grid = small_wall();
    let want: BTreeMap<TileId, String> = grid
        .tiles()
        .map(|t| (t, fnv1a(image.crop(grid.tile_rect(t)).unwrap().data())))
        .collect();
    let got = timeout(WAIT, async {
        loop {
            let d = digests(&mut ui, 2).await;
            let d: BTreeMap<TileId, String> = d.into_iter().map(|(t, (_, dg))| (t, dg)).collect();
            if d == want {
                return d;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    })
    .await
    .expect("tiles never showed the still");
    assert_eq!(got, want);

    // a command naming nothing is refused, with exactly one reply
    ui_send(
        &mut ui,
        &UiMessage::Command(Command {
            command_id: 2,
            op: CommandOp::Remove {
                placement: PlacementId(99),
            },
        }),
    )
    .await;
    let code = ui_expect(&mut ui, |m| match m {
        UiMessage::Nack(n) if n.command_id == 2 => Some(n.code),
        UiMessage::Ack(a) if a.command_id == 2 => panic!("unexpected ACK"),
        _ => None,
    })
    .await;
    assert_eq!(code, "NotFound");

    ui.send(WsMessage::Text("not json".into())).await.unwrap();
    let code = ui_expect(&mut ui, |m| match m {
        UiMessage::Nack(n) if n.command_id == 0 => Some(n.code),
        _ => None,
    })
    .await;
    assert_eq!(code, "Payload");

    let _ = stop_src.send(());
    let outcome = timeout(WAIT, src).await.unwrap().unwrap();
    assert_eq!(outcome.exit_code, 0);
    let eos = ui_expect(&mut ui, |m| match m {
        UiMessage::Eos(e) => Some(e.content_id),
        UiMessage::SceneSnapshot(s) if s.scene.content(content).is_some_and(|c| !c.online) => Some(content),
        _ => None,
    })
    .await;
    assert_eq!(eos, content);
    stop_wall(wall).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn streamer_runs_to_end_of_stream() {
    let wall = start_wall(12).await;
    let mut ui = ui_connect(&wall.ui).await;
    let provider = FrameProvider::pattern(Pattern::Gradient, 96, 24).unwrap().with_limit(20);
    let (_stop, src) = start_source(&wall.proto, "loop", Role::Streamer, provider, Some(30)).await;
    let content: ContentId = ui_expect(&mut ui, |m| match m {
        UiMessage::SourceOffer(o) => Some(o.content_id),
        _ => None,
    })
    .await;
    ui_send(
        &mut ui,
        &UiMessage::Command(Command {
            command_id: 7,
            op: CommandOp::Place {
                content,
                x: 16.0,
                y: 4.0,
                scale: 1.0,
                rotation_deg: 0.0,
            },
        }),
    )
    .await;
    ui_expect(&mut ui, |m| matches!(m, UiMessage::Ack(ref a) if a.command_id == 7).then_some(())).await;
    let outcome = timeout(WAIT, src).await.unwrap().unwrap();
    assert_eq!(outcome.exit_code, 0, "{:?}", outcome.error);
    assert_eq!(outcome.client.counters().frames_produced, 20);
    assert!(outcome.client.counters().frames_sent > 0);
    tokio::time::sleep(Duration::from_millis(200)).await;
    let nodes = stop_wall(wall).await;
    for node in &nodes {
        assert!(node.counters().frames_presented > 0, "{} presented nothing", node.tile());
        assert_eq!(node.counters().unexpected_frames, 0);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn second_source_is_refused_when_slots_are_full() {
    let wall = start_wall(1).await;
    let mut ui = ui_connect(&wall.ui).await;
    let (_a_stop, _a) = start_source(&wall.proto, "a", Role::Streamer, FrameProvider::pattern(Pattern::Bars, 8, 8).unwrap(), Some(5)).await;
    ui_expect(&mut ui, |m| matches!(m, UiMessage::SourceOffer(_)).then_some(())).await;
    let (_b_stop, b) = start_source(&wall.proto, "b", Role::Streamer, FrameProvider::pattern(Pattern::Bars, 8, 8).unwrap(), Some(5)).await;
    let outcome = timeout(WAIT, b).await.unwrap().unwrap();
    assert_eq!(outcome.exit_code, 2);
    assert!(matches!(outcome.error, Some(tilewall::source::SourceError::SlotsExhausted)));
    stop_wall(wall).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn duplicate_display_is_refused() {
    let wall = start_wall(12).await;
    // give both tiles time to register
    tokio::time::sleep(Duration::from_millis(300)).await;
    let grid = small_wall();
    let dup = DisplayNode::new(grid.clone(), TileId::new(0, 0), None);
    let err = timeout(
        WAIT,
        run_display(dup, DisplayRuntimeConfig::new(wall.proto.clone()), None, std::future::pending()),
    )
    .await
    .unwrap()
    .err()
    .expect("duplicate tile accepted");
    assert!(err.to_string().contains("DuplicateTile"), "{err}");
    stop_wall(wall).await;
}

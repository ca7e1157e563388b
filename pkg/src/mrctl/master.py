"""The single authoritative registry: names, topics, services, parameters.

The registry itself is a pure state machine; every mutation returns the
notifications it implies as ``(conn_id, message)`` intents.  MasterServer
wraps it in a TCP listener speaking the JSON-lines control protocol and
owns delivery: notifications are queued to their destinations before the
mutating request is acknowledged, and each destination sees them in order.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass, field

from . import msgs, wire
from .names import GraphName, MalformedName, canonicalize

DEFAULT_PORT = 11311

LOG_LEVELS = ("debug", "info", "warn", "error")


class MasterError(Exception):
    """Protocol-level failure with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _err(code, message):
    return MasterError(code, message)


@dataclass
class NodeRecord:
    name: GraphName
    control_uri: str
    data_uri: str
    conn_id: int
    registered_at: float


@dataclass
class TopicRecord:
    topic: GraphName
    msg_type: str
    publishers: dict[GraphName, str] = field(default_factory=dict)   # node -> data_uri
    subscribers: set[GraphName] = field(default_factory=set)


@dataclass
class ServiceRecord:
    service: GraphName
    provider: GraphName
    data_uri: str


class Registry:
    """In-memory registry; all methods are synchronous and single-threaded.

    Mutating methods return ``(result, notifications)`` where notifications
    is a list of ``(conn_id, obj)`` to deliver after commit.
    """

    def __init__(self, clock=time.monotonic):
        self._clock = clock
        self.nodes: dict[GraphName, NodeRecord] = {}
        self.topics: dict[GraphName, TopicRecord] = {}
        self.services: dict[GraphName, ServiceRecord] = {}
        self.params: dict[GraphName, object] = {}

    # -- helpers ----------------------------------------------------------

    def _live(self, caller: GraphName) -> NodeRecord:
        rec = self.nodes.get(caller)
        if rec is None:
            raise _err("UnknownCaller", f"{caller.text} has not sent hello")
        return rec

    def _topic(self, topic: GraphName, msg_type: str) -> TopicRecord:
        rec = self.topics.get(topic)
        if rec is None:
            rec = TopicRecord(topic=topic, msg_type=msg_type)
            self.topics[topic] = rec
        elif not msgs.types_compatible(rec.msg_type, msg_type):
            raise _err(
                "TypeMismatch",
                f"topic {topic.text} is {rec.msg_type}, not {msg_type}",
            )
        elif rec.msg_type == msgs.ANY_TYPE and msg_type != msgs.ANY_TYPE:
            rec.msg_type = msg_type  # first concrete registrant fixes the type
        return rec

    def _publisher_uris(self, rec: TopicRecord) -> list[str]:
        return sorted(rec.publishers.values())

    def _publisher_update(self, rec: TopicRecord) -> list[tuple[int, dict]]:
        uris = self._publisher_uris(rec)
        notes = []
        for sub in sorted(rec.subscribers):
            node = self.nodes.get(sub)
            if node is not None:
                notes.append((node.conn_id, {
                    "notify": "publisherUpdate",
                    "params": {"topic": rec.topic.text, "publishers": uris},
                }))
        return notes

    def _gc_topic(self, rec: TopicRecord) -> None:
        if not rec.publishers and not rec.subscribers:
            self.topics.pop(rec.topic, None)

    # -- node lifecycle ----------------------------------------------------

    def hello(self, name: GraphName, control_uri: str, data_uri: str,
              conn_id: int):
        notes = []
        evicted = False
        old = self.nodes.get(name)
        if old is not None:
            evicted = True
            notes.append((old.conn_id, {
                "notify": "shutdown",
                "params": {"reason": f"superseded by new registration of {name.text}"},
            }))
            notes.extend(self._remove_node(old))
        self.nodes[name] = NodeRecord(
            name=name, control_uri=control_uri, data_uri=data_uri,
            conn_id=conn_id, registered_at=self._clock(),
        )
        return {"evicted_previous": evicted}, notes

    def _remove_node(self, rec: NodeRecord) -> list[tuple[int, dict]]:
        notes = []
        self.nodes.pop(rec.name, None)
        for trec in list(self.topics.values()):
            changed = False
            if rec.name in trec.publishers:
                del trec.publishers[rec.name]
                changed = True
            if rec.name in trec.subscribers:
                trec.subscribers.discard(rec.name)
            if changed:
                notes.extend(self._publisher_update(trec))
            self._gc_topic(trec)
        for srec in list(self.services.values()):
            if srec.provider == rec.name:
                del self.services[srec.service]
        return notes

    def drop_connection(self, conn_id: int) -> list[tuple[int, dict]]:
        """Cleanup when a control connection dies; removes the node it carried."""
        notes = []
        for rec in list(self.nodes.values()):
            if rec.conn_id == conn_id:
                notes.extend(self._remove_node(rec))
        return notes

    def unregister(self, caller: GraphName, kind: str, name: GraphName | None):
        rec = self._live(caller)
        removed = 0
        notes = []
        if kind == "node":
            removed = 1
            notes = self._remove_node(rec)
        elif kind == "publisher":
            trec = self.topics.get(name)
            if trec is not None and caller in trec.publishers:
                del trec.publishers[caller]
                removed = 1
                notes.extend(self._publisher_update(trec))
                self._gc_topic(trec)
        elif kind == "subscriber":
            trec = self.topics.get(name)
            if trec is not None and caller in trec.subscribers:
                trec.subscribers.discard(caller)
                removed = 1
                self._gc_topic(trec)
        elif kind == "service":
            srec = self.services.get(name)
            if srec is not None and srec.provider == caller:
                del self.services[name]
                removed = 1
        else:
            raise _err("BadRequest", f"unknown unregister kind {kind!r}")
        return {"removed": removed}, notes

    # -- pub/sub/service registration ---------------------------------------

    def register_publisher(self, caller: GraphName, topic: GraphName,
                           msg_type: str, data_uri: str):
        self._live(caller)
        rec = self._topic(topic, msg_type)
        rec.publishers[caller] = data_uri
        notes = self._publisher_update(rec)
        subscriber_uris = sorted(
            self.nodes[s].data_uri for s in rec.subscribers if s in self.nodes
        )
        return {"peers": subscriber_uris}, notes

    def register_subscriber(self, caller: GraphName, topic: GraphName,
                            msg_type: str):
        self._live(caller)
        rec = self._topic(topic, msg_type)
        rec.subscribers.add(caller)
        return {"publishers": self._publisher_uris(rec)}, []

    def register_service(self, caller: GraphName, service: GraphName,
                         data_uri: str):
        self._live(caller)
        old = self.services.get(service)
        notes = []
        replaced = False
        if old is not None and old.provider != caller:
            replaced = True
            prev = self.nodes.get(old.provider)
            if prev is not None:
                notes.append((prev.conn_id, {
                    "notify": "serviceReplaced",
                    "params": {"service": service.text, "by": caller.text},
                }))
        self.services[service] = ServiceRecord(service=service, provider=caller,
                                               data_uri=data_uri)
        return {"replaced": replaced}, notes

    def lookup_service(self, service: GraphName) -> dict:
        rec = self.services.get(service)
        if rec is None:
            raise _err("NotFound", f"no provider for service {service.text}")
        return {"uri": rec.data_uri}

    # -- introspection -------------------------------------------------------

    def system_state(self) -> dict:
        publishers = {}
        subscribers = {}
        for topic in sorted(self.topics):
            rec = self.topics[topic]
            if rec.publishers:
                publishers[topic.text] = sorted(n.text for n in rec.publishers)
            if rec.subscribers:
                subscribers[topic.text] = sorted(n.text for n in rec.subscribers)
        services = {
            s.text: [self.services[s].provider.text] for s in sorted(self.services)
        }
        return {"publishers": publishers, "subscribers": subscribers,
                "services": services}

    def topic_types(self) -> dict:
        return {t.text: rec.msg_type for t, rec in sorted(self.topics.items())}

    # -- parameters ----------------------------------------------------------

    def param_set(self, key: GraphName, value) -> None:
        if isinstance(value, (dict, list)):
            raise _err("BadRequest", "parameter values must be scalars")
        self.params[key] = value

    def param_get(self, key: GraphName):
        if key not in self.params:
            raise _err("NotFound", f"no parameter {key.text}")
        return self.params[key]

    def param_has(self, key: GraphName) -> bool:
        return key in self.params

    def param_delete(self, key: GraphName) -> None:
        if key not in self.params:
            raise _err("NotFound", f"no parameter {key.text}")
        del self.params[key]

    # -- logger forwarding -----------------------------------------------------

    def set_logger_level(self, node: GraphName, logger: str, level: str):
        if level not in LOG_LEVELS:
            raise _err("BadRequest", f"level must be one of {LOG_LEVELS}")
        rec = self.nodes.get(node)
        if rec is None:
            raise _err("NotFound", f"no node {node.text}")
        note = (rec.conn_id, {
            "notify": "setLoggerLevel",
            "params": {"logger": logger, "level": level},
        })
        return {}, [note]


class _Conn:
    """One accepted control connection with an ordered outbound queue."""

    _next_id = 0
    _id_lock = threading.Lock()

    def __init__(self, sock: socket.socket, addr):
        with _Conn._id_lock:
            _Conn._next_id += 1
            self.conn_id = _Conn._next_id
        self.channel = wire.LineChannel(sock)
        self.addr = addr
        self.alive = True
        self._out = []
        self._cv = threading.Condition()

    def enqueue(self, obj) -> None:
        with self._cv:
            self._out.append(obj)
            self._cv.notify()

    def next_outbound(self, timeout=0.5):
        with self._cv:
            if not self._out:
                self._cv.wait(timeout)
            if self._out:
                return self._out.pop(0)
            return None


class MasterServer:
    """TCP control-plane server; one reader and one writer thread per peer."""

    def __init__(self, port: int = DEFAULT_PORT, host: str = "0.0.0.0",
                 clock_ns=time.time_ns):
        self.registry = Registry()
        self._lock = threading.Lock()
        self._clock_ns = clock_ns
        self._host = host
        self._requested_port = port
        self._sock: socket.socket | None = None
        self._conns: dict[int, _Conn] = {}
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    @property
    def uri(self) -> str:
        host = "127.0.0.1" if self._host == "0.0.0.0" else self._host
        return f"http://{host}:{self.port}"

    def start(self) -> "MasterServer":
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((self._host, self._requested_port))
        self._sock.listen(64)
        self._sock.settimeout(0.2)
        t = threading.Thread(target=self._accept_loop, name="master-accept",
                             daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._sock is not None:
            self._sock.close()
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            conn.channel.close()
        for t in self._threads:
            t.join(timeout=2.0)

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            self.stop()

    # -- internals ------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock, addr)
            with self._lock:
                self._conns[conn.conn_id] = conn
            for target, name in ((self._reader_loop, "master-read"),
                                 (self._writer_loop, "master-write")):
                t = threading.Thread(target=target, args=(conn,),
                                     name=f"{name}-{conn.conn_id}", daemon=True)
                t.start()
                self._threads.append(t)

    def _writer_loop(self, conn: _Conn) -> None:
        while conn.alive or conn._out:
            obj = conn.next_outbound()
            if obj is None:
                if not conn.alive:
                    return
                continue
            try:
                conn.channel.send(obj)
            except OSError:
                return

    def _reader_loop(self, conn: _Conn) -> None:
        try:
            while not self._stop.is_set():
                try:
                    request = conn.channel.recv()
                except (OSError, ValueError):
                    break
                if request is None:
                    break
                self._handle(conn, request)
        finally:
            self._disconnect(conn)

    def _disconnect(self, conn: _Conn) -> None:
        with self._lock:
            self._conns.pop(conn.conn_id, None)
            notes = self.registry.drop_connection(conn.conn_id)
            self._deliver(notes)
        conn.alive = False
        conn.channel.close()

    def _deliver(self, notes) -> None:
        # callers hold self._lock, fixing the order notifications commit
        for conn_id, obj in notes:
            target = self._conns.get(conn_id)
            if target is not None:
                target.enqueue(obj)

    def _handle(self, conn: _Conn, request) -> None:
        req_id = request.get("id") if isinstance(request, dict) else None
        try:
            if not isinstance(request, dict) or "method" not in request:
                raise _err("BadRequest", "request must carry a method")
            method = request["method"]
            params = request.get("params") or {}
            with self._lock:
                result, notes = self._dispatch(conn, method, params)
                self._deliver(notes)
                conn.enqueue({"id": req_id, "ok": True, "result": result})
        except MasterError as exc:
            conn.enqueue({"id": req_id, "ok": False,
                          "error": {"code": exc.code, "message": str(exc)}})
        except MalformedName as exc:
            conn.enqueue({"id": req_id, "ok": False,
                          "error": {"code": "MalformedName", "message": str(exc)}})
        except Exception as exc:  # malformed params and the like
            conn.enqueue({"id": req_id, "ok": False,
                          "error": {"code": "BadRequest", "message": str(exc)}})

    def _dispatch(self, conn: _Conn, method: str, params: dict):
        reg = self.registry
        if method == "hello":
            return reg.hello(canonicalize(params["name"]),
                             str(params.get("control_uri", "")),
                             str(params.get("data_uri", "")),
                             conn.conn_id)
        if method == "registerPublisher":
            return reg.register_publisher(canonicalize(params["caller"]),
                                          canonicalize(params["topic"]),
                                          str(params["type"]),
                                          str(params["data_uri"]))
        if method == "registerSubscriber":
            return reg.register_subscriber(canonicalize(params["caller"]),
                                           canonicalize(params["topic"]),
                                           str(params["type"]))
        if method == "unregister":
            name = params.get("name")
            return reg.unregister(canonicalize(params["caller"]),
                                  str(params["kind"]),
                                  canonicalize(name) if name else None)
        if method == "registerService":
            return reg.register_service(canonicalize(params["caller"]),
                                        canonicalize(params["service"]),
                                        str(params["data_uri"]))
        if method == "lookupService":
            return reg.lookup_service(canonicalize(params["service"])), []
        if method == "getSystemState":
            return reg.system_state(), []
        if method == "getTopicTypes":
            return reg.topic_types(), []
        if method == "setParam":
            reg.param_set(canonicalize(params["key"]), params.get("value"))
            return {}, []
        if method == "getParam":
            return {"value": reg.param_get(canonicalize(params["key"]))}, []
        if method == "hasParam":
            return {"has": reg.param_has(canonicalize(params["key"]))}, []
        if method == "deleteParam":
            reg.param_delete(canonicalize(params["key"]))
            return {}, []
        if method == "setLoggerLevel":
            return reg.set_logger_level(canonicalize(params["node"]),
                                        str(params["logger"]),
                                        str(params["level"]))
        if method == "timeProbe":
            t1 = self._clock_ns()
            return {"t1": t1, "t2": self._clock_ns()}, []
        raise _err("BadRequest", f"unknown method {method!r}")

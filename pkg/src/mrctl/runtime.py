"""Node runtime: master session, peer-to-peer topic transport, services.

A NodeSession owns one persistent control connection to the master (JSON
lines, carrying requests and unsolicited notifications) and one data
listener socket.  Topic data never touches the master: subscribers dial
publisher data endpoints directly and receive length-prefixed JSON frames.
"""

from __future__ import annotations

import logging
import os
import random
import socket
import threading
import time
from dataclasses import dataclass, field

from . import wire
from .clock import ClockEstimate, estimate_clock_offset
from .hosts import HostTable, resolve_host
from .msgs import ANY_TYPE, types_compatible, validate_payload
from .names import (GraphName, NamespaceCtx, RemapRule, apply_remaps,
                    canonicalize, resolve_name)

DEFAULT_MASTER_URI = "http://127.0.0.1:11311"

_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO,
           "warn": logging.WARNING, "error": logging.ERROR}

# Reconnect backoff for data-plane dials: 100 ms doubling to a 3.2 s cap.
_BACKOFF_BASE = 0.1
_BACKOFF_CAP = 3.2


class MasterUnreachable(ConnectionError):
    pass


class TypeMismatch(Exception):
    pass


class NotFound(KeyError):
    pass


class ProviderUnreachable(ConnectionError):
    pass


class RemoteError(Exception):
    pass


class SessionClosed(RuntimeError):
    pass


def _backoff_delays():
    delay = _BACKOFF_BASE
    while True:
        yield delay * random.uniform(0.8, 1.2)
        delay = min(delay * 2, _BACKOFF_CAP)


@dataclass
class NodeConfig:
    master_host: str
    master_port: int
    hostname: str
    namespace: GraphName
    node_name: GraphName
    remaps: list[RemapRule] = field(default_factory=list)
    host_table: HostTable | None = None

    @property
    def ctx(self) -> NamespaceCtx:
        return NamespaceCtx(ns=self.namespace, node_name=self.node_name)


def split_remap_args(argv):
    """Partition argv into plain args and `name:=value` remap tokens."""
    plain, assignments = [], {}
    for token in argv:
        if ":=" in token:
            key, _, value = token.partition(":=")
            assignments[key] = value
        else:
            plain.append(token)
    return plain, assignments


def build_config(default_name: str, env=None, *, argv=None, master_uri=None,
                 hostname=None, namespace=None, name=None,
                 host_table=None) -> NodeConfig:
    """Environment-driven configuration; explicit keyword overrides win."""
    env = os.environ if env is None else env
    uri = master_uri or env.get("ROS_MASTER_URI") or DEFAULT_MASTER_URI
    master_host, master_port = wire.parse_hostport(uri)
    host = hostname or env.get("ROS_HOSTNAME") or "127.0.0.1"
    ns_text = namespace if namespace is not None else env.get("ROS_NAMESPACE", "/")
    if not ns_text.startswith("/"):
        ns_text = "/" + ns_text
    ns = canonicalize(ns_text)

    remaps = []
    if argv:
        _, assignments = split_remap_args(argv)
        for key, value in assignments.items():
            if key == "__name":
                name = value
            elif not key.startswith("__"):
                remaps.append(RemapRule(key, value))

    chosen = name or default_name
    if chosen.startswith("/"):
        node_name = canonicalize(chosen)
    else:
        node_name = ns.child(chosen)
    return NodeConfig(master_host=master_host, master_port=master_port,
                      hostname=host, namespace=ns, node_name=node_name,
                      remaps=remaps, host_table=host_table)


class _ControlClient:
    """Request/response multiplexing plus notification dispatch."""

    def __init__(self, host, port, notify_handler, host_table=None,
                 connect_timeout=2.0, request_timeout=10.0):
        try:
            ip = resolve_host(host, host_table)
            sock = wire.connect(ip, port, timeout=connect_timeout)
        except OSError as exc:
            raise MasterUnreachable(f"cannot reach master at {host}:{port}: {exc}") from exc
        sock.settimeout(None)
        self.local_uri = "%s:%d" % sock.getsockname()[:2]
        self.channel = wire.LineChannel(sock)
        self._timeout = request_timeout
        self._notify = notify_handler
        self._pending: dict[int, list] = {}
        self._cv = threading.Condition()
        self._next_id = 0
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop,
                                        name="control-read", daemon=True)
        self._reader.start()

    def request(self, method: str, params: dict | None = None):
        with self._cv:
            if self._closed:
                raise SessionClosed("control channel closed")
            self._next_id += 1
            req_id = self._next_id
            self._pending[req_id] = []
        try:
            self.channel.send({"id": req_id, "method": method,
                               "params": params or {}})
        except OSError as exc:
            raise MasterUnreachable(f"master connection lost: {exc}") from exc
        deadline = time.monotonic() + self._timeout
        with self._cv:
            while not self._pending[req_id]:
                if self._closed:
                    self._pending.pop(req_id, None)
                    raise MasterUnreachable("master connection closed mid-request")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._pending.pop(req_id, None)
                    raise MasterUnreachable(f"no response to {method} in {self._timeout}s")
                self._cv.wait(remaining)
            response = self._pending.pop(req_id)[0]
        if response.get("ok"):
            return response.get("result")
        error = response.get("error") or {}
        code, message = error.get("code"), error.get("message", "")
        if code == "TypeMismatch":
            raise TypeMismatch(message)
        if code == "NotFound":
            raise NotFound(message)
        raise RemoteError(f"{code}: {message}")

    def _read_loop(self):
        while True:
            try:
                obj = self.channel.recv()
            except (OSError, ValueError):
                obj = None
            if obj is None:
                break
            if "notify" in obj:
                try:
                    self._notify(obj["notify"], obj.get("params") or {})
                except Exception:
                    logging.getLogger("mrctl.runtime").exception(
                        "notification handler failed")
            else:
                with self._cv:
                    slot = self._pending.get(obj.get("id"))
                    if slot is not None:
                        slot.append(obj)
                    self._cv.notify_all()
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify_all()
        self.channel.close()


class _PeerSender:
    """Publisher-side queue and writer thread for one subscriber connection."""

    def __init__(self, sock, caller_id):
        self.sock = sock
        self.caller_id = caller_id
        self._queue: list = []
        self._cv = threading.Condition()
        self.closed = False
        self._thread = threading.Thread(target=self._run, name="pub-send",
                                        daemon=True)
        self._thread.start()

    def enqueue(self, envelope):
        with self._cv:
            if self.closed:
                return
            self._queue.append(envelope)
            self._cv.notify()

    def _run(self):
        while True:
            with self._cv:
                while not self._queue and not self.closed:
                    self._cv.wait(0.5)
                if self.closed and not self._queue:
                    break
                envelope = self._queue.pop(0)
            try:
                wire.send_frame(self.sock, envelope)
            except OSError:
                self.close()
                return

    def close(self):
        with self._cv:
            self.closed = True
            self._cv.notify_all()
        try:
            self.sock.close()
        except OSError:
            pass


class Publisher:
    def __init__(self, session, topic: GraphName, msg_type: str, latch: bool):
        self._session = session
        self.topic = topic
        self.msg_type = msg_type
        self.latch = latch
        self._seq = 0
        self._last = None
        self._peers: list[_PeerSender] = []
        self._lock = threading.Lock()

    @property
    def peer_count(self):
        with self._lock:
            return len(self._peers)

    def publish(self, payload) -> None:
        validate_payload(self.msg_type, payload)
        with self._lock:
            envelope = {"topic": self.topic.text, "type": self.msg_type,
                        "seq": self._seq, "stamp": time.time_ns(),
                        "payload": payload}
            self._seq += 1
            if self.latch:
                self._last = envelope
            self._peers = [p for p in self._peers if not p.closed]
            for peer in self._peers:
                peer.enqueue(envelope)

    def _attach(self, peer: _PeerSender) -> None:
        with self._lock:
            if self.latch and self._last is not None:
                peer.enqueue(self._last)
            self._peers.append(peer)

    def _close_peers(self):
        with self._lock:
            peers, self._peers = self._peers, []
        for peer in peers:
            peer.close()


class _SubConn:
    """Subscriber-side dialer/reader for one publisher data endpoint."""

    def __init__(self, subscription, uri):
        self.subscription = subscription
        self.uri = uri
        self.closed = False
        self.sock = None
        self._thread = threading.Thread(target=self._run, name="sub-read",
                                        daemon=True)
        self._thread.start()

    def _run(self):
        sub = self.subscription
        session = sub._session
        host, port = wire.parse_hostport(self.uri)
        sock = None
        for delay in _backoff_delays():
            if self.closed or sub.closed:
                return
            try:
                ip = resolve_host(host, session.config.host_table)
                sock = wire.connect(ip, port, timeout=2.0)
                break
            except OSError:
                time.sleep(delay)  # retried until unlisted or closed, never fatal
        sock.settimeout(None)
        self.sock = sock
        try:
            wire.send_frame(sock, {"op": "subscribe", "topic": sub.topic.text,
                                   "type": sub.msg_type,
                                   "caller_id": session.name.text})
            ack = wire.recv_frame(sock)
            if not ack or not ack.get("ok"):
                self._drop()
                return
            while not self.closed and not sub.closed:
                envelope = wire.recv_frame(sock)
                if envelope is None:
                    break
                sub._dispatch(envelope)
        except (OSError, ValueError):
            pass
        finally:
            self._drop()

    def _drop(self):
        self.close()
        self.subscription._forget(self.uri, self)

    def close(self):
        self.closed = True
        if self.sock is not None:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self.sock.close()
            except OSError:
                pass


class Subscription:
    def __init__(self, session, topic: GraphName, msg_type: str, callback,
                 envelope_cb=None):
        self._session = session
        self.topic = topic
        self.msg_type = msg_type
        self.callback = callback
        self.envelope_cb = envelope_cb
        self.closed = False
        self._conns: dict[str, _SubConn] = {}
        self._lock = threading.Lock()
        self._dispatch_lock = threading.Lock()

    def update_publishers(self, uris) -> None:
        """Dial newly listed endpoints, drop connections no longer listed."""
        with self._lock:
            if self.closed:
                return
            current = set(self._conns)
            wanted = set(uris)
            stale = [self._conns.pop(u) for u in current - wanted]
            for uri in wanted - current:
                self._conns[uri] = _SubConn(self, uri)
        for conn in stale:
            conn.close()

    def _forget(self, uri, conn) -> None:
        with self._lock:
            if self._conns.get(uri) is conn:
                del self._conns[uri]

    def _dispatch(self, envelope) -> None:
        with self._dispatch_lock:
            if self.closed:
                return
            if self.envelope_cb is not None:
                self.envelope_cb(envelope)
            else:
                self.callback(envelope["payload"])

    def close(self) -> None:
        self.closed = True
        with self._lock:
            conns, self._conns = list(self._conns.values()), {}
        for conn in conns:
            conn.close()
        self._session._unsubscribe(self)


class NodeSession:
    """A live node: registered name, topic endpoints, loggers, parameters."""

    def __init__(self, config: NodeConfig, connect_timeout=2.0):
        self.config = config
        self.name = config.node_name
        self._publishers: dict[str, Publisher] = {}
        self._subscriptions: dict[str, Subscription] = {}
        self._services: dict[str, object] = {}
        self._loggers: dict[str, logging.Logger] = {}
        self._shutdown_event = threading.Event()
        self._shutdown_reason = None
        self._lock = threading.Lock()

        self._control = _ControlClient(config.master_host, config.master_port,
                                       self._on_notify, config.host_table,
                                       connect_timeout=connect_timeout)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("0.0.0.0", 0))
        self._listener.listen(64)
        self._listener.settimeout(0.5)
        self.data_uri = f"{config.hostname}:{self._listener.getsockname()[1]}"
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="data-accept", daemon=True)
        self._accept_thread.start()
        try:
            self._control.request("hello", {"name": self.name.text,
                                            "control_uri": self._control.local_uri,
                                            "data_uri": self.data_uri})
        except Exception:
            self._shutdown_event.set()
            self._control.close()
            self._listener.close()
            raise

    # -- naming --------------------------------------------------------------

    def resolve(self, raw: str) -> GraphName:
        """Resolve against the session namespace, then apply remap rules."""
        resolved = resolve_name(raw, self.config.ctx)
        return apply_remaps(resolved, self.config.remaps, self.config.ctx)

    # -- topics ----------------------------------------------------------------

    def advertise(self, topic: str, msg_type: str, latch: bool = False) -> Publisher:
        self._check_open()
        resolved = self.resolve(topic)
        with self._lock:
            existing = self._publishers.get(resolved.text)
            if existing is not None:
                if not types_compatible(existing.msg_type, msg_type):
                    raise TypeMismatch(f"already advertised as {existing.msg_type}")
                return existing
        self._control.request("registerPublisher", {
            "caller": self.name.text, "topic": resolved.text,
            "type": msg_type, "data_uri": self.data_uri})
        publisher = Publisher(self, resolved, msg_type, latch)
        with self._lock:
            self._publishers[resolved.text] = publisher
        return publisher

    def subscribe(self, topic: str, msg_type: str, callback,
                  envelope_cb=None) -> Subscription:
        self._check_open()
        resolved = self.resolve(topic)
        subscription = Subscription(self, resolved, msg_type, callback,
                                    envelope_cb=envelope_cb)
        with self._lock:
            self._subscriptions[resolved.text] = subscription
        try:
            result = self._control.request("registerSubscriber", {
                "caller": self.name.text, "topic": resolved.text,
                "type": msg_type})
        except Exception:
            with self._lock:
                self._subscriptions.pop(resolved.text, None)
            subscription.closed = True
            raise
        subscription.update_publishers(result.get("publishers", []))
        return subscription

    def _unsubscribe(self, subscription: Subscription) -> None:
        with self._lock:
            if self._subscriptions.get(subscription.topic.text) is subscription:
                del self._subscriptions[subscription.topic.text]
        if not self._shutdown_event.is_set():
            try:
                self._control.request("unregister", {
                    "caller": self.name.text, "kind": "subscriber",
                    "name": subscription.topic.text})
            except (MasterUnreachable, SessionClosed, RemoteError):
                pass

    # -- services ---------------------------------------------------------------

    def advertise_service(self, service: str, handler) -> GraphName:
        """handler(request_dict) -> response payload; errors become RemoteError."""
        self._check_open()
        resolved = self.resolve(service)
        with self._lock:
            self._services[resolved.text] = handler
        self._control.request("registerService", {
            "caller": self.name.text, "service": resolved.text,
            "data_uri": self.data_uri})
        return resolved

    def call_service(self, service: str, request, timeout: float = 10.0):
        self._check_open()
        resolved = self.resolve(service)
        result = self._control.request("lookupService", {"service": resolved.text})
        uri = result["uri"]
        host, port = wire.parse_hostport(uri)
        try:
            ip = resolve_host(host, self.config.host_table)
            sock = wire.connect(ip, port, timeout=timeout)
        except OSError as exc:
            raise ProviderUnreachable(f"{resolved.text} provider at {uri}: {exc}") from exc
        try:
            sock.settimeout(timeout)
            wire.send_frame(sock, {"op": "call", "service": resolved.text,
                                   "caller_id": self.name.text,
                                   "request": request})
            response = wire.recv_frame(sock)
        except (OSError, ValueError) as exc:
            raise ProviderUnreachable(f"{resolved.text}: {exc}") from exc
        finally:
            sock.close()
        if response is None:
            raise ProviderUnreachable(f"{resolved.text}: provider closed connection")
        if response.get("ok"):
            return response.get("result")
        raise RemoteError(response.get("error", {}).get("message", "service failed"))

    # -- parameters ----------------------------------------------------------------

    def set_param(self, key: str, value) -> None:
        self._control.request("setParam", {"key": self.resolve(key).text,
                                           "value": value})

    def get_param(self, key: str):
        return self._control.request("getParam",
                                     {"key": self.resolve(key).text})["value"]

    def has_param(self, key: str) -> bool:
        return self._control.request("hasParam",
                                     {"key": self.resolve(key).text})["has"]

    def delete_param(self, key: str) -> None:
        self._control.request("deleteParam", {"key": self.resolve(key).text})

    # -- time ------------------------------------------------------------------------

    def sync_probe(self) -> ClockEstimate:
        """Four-timestamp exchange with the master over the control channel."""
        t0 = time.time_ns()
        result = self._control.request("timeProbe")
        t3 = time.time_ns()
        return estimate_clock_offset(t0, result["t1"], result["t2"], t3)

    # -- logging ---------------------------------------------------------------------

    def get_logger(self, logger: str = "main") -> logging.Logger:
        with self._lock:
            existing = self._loggers.get(logger)
            if existing is not None:
                return existing
            key = "mrctl.node" + self.name.text.replace("/", ".") + "." + logger
            log = logging.getLogger(key)
            if log.level == logging.NOTSET:
                log.setLevel(logging.INFO)
            self._loggers[logger] = log
            return log

    # -- lifecycle ----------------------------------------------------------------------

    def _on_notify(self, kind: str, params: dict) -> None:
        if kind == "publisherUpdate":
            with self._lock:
                subscription = self._subscriptions.get(params.get("topic"))
            if subscription is not None:
                subscription.update_publishers(params.get("publishers", []))
        elif kind == "shutdown":
            self._shutdown(reason=params.get("reason", "evicted"),
                           unregister=False)
        elif kind == "setLoggerLevel":
            level = _LEVELS.get(params.get("level"))
            if level is not None:
                self.get_logger(params.get("logger", "main")).setLevel(level)

    def _check_open(self):
        if self._shutdown_event.is_set():
            raise SessionClosed(self._shutdown_reason or "session closed")

    @property
    def is_shutdown(self) -> bool:
        return self._shutdown_event.is_set()

    @property
    def shutdown_reason(self) -> str | None:
        return self._shutdown_reason

    def spin(self, duration: float | None = None) -> None:
        """Block until shutdown (or for `duration` seconds)."""
        self._shutdown_event.wait(duration)

    def shutdown(self) -> None:
        self._shutdown(reason="shutdown requested", unregister=True)

    def _shutdown(self, reason: str, unregister: bool) -> None:
        if self._shutdown_event.is_set():
            return
        self._shutdown_reason = reason
        self._shutdown_event.set()
        if unregister:
            try:
                self._control.request("unregister", {"caller": self.name.text,
                                                     "kind": "node"})
            except (MasterUnreachable, SessionClosed, RemoteError, NotFound):
                pass
        self._control.close()
        self._listener.close()
        with self._lock:
            publishers = list(self._publishers.values())
            subscriptions = list(self._subscriptions.values())
            self._publishers.clear()
            self._services.clear()
        for publisher in publishers:
            publisher._close_peers()
        for subscription in subscriptions:
            subscription.close()

    # -- data plane -------------------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._shutdown_event.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._serve_data_conn, args=(sock,),
                             name="data-serve", daemon=True).start()

    def _serve_data_conn(self, sock: socket.socket) -> None:
        try:
            header = wire.recv_frame(sock)
        except (OSError, ValueError):
            sock.close()
            return
        if not isinstance(header, dict):
            sock.close()
            return
        op = header.get("op")
        if op == "subscribe":
            self._serve_subscriber(sock, header)
        elif op == "call":
            self._serve_service_call(sock, header)
        else:
            try:
                wire.send_frame(sock, {"ok": False, "error": {
                    "code": "BadRequest", "message": f"unknown op {op!r}"}})
            except OSError:
                pass
            sock.close()

    def _serve_subscriber(self, sock, header) -> None:
        topic = header.get("topic")
        requested = header.get("type", ANY_TYPE)
        with self._lock:
            publisher = self._publishers.get(topic)
        try:
            if publisher is None:
                wire.send_frame(sock, {"ok": False, "error": {
                    "code": "NotFound", "message": f"not publishing {topic}"}})
                sock.close()
                return
            if not types_compatible(publisher.msg_type, requested):
                wire.send_frame(sock, {"ok": False, "error": {
                    "code": "TypeMismatch",
                    "message": f"{topic} is {publisher.msg_type}, not {requested}"}})
                sock.close()
                return
            wire.send_frame(sock, {"ok": True, "latched": publisher.latch})
        except OSError:
            sock.close()
            return
        peer = _PeerSender(sock, header.get("caller_id", "?"))
        publisher._attach(peer)

    def _serve_service_call(self, sock, header) -> None:
        service = header.get("service")
        with self._lock:
            handler = self._services.get(service)
        try:
            if handler is None:
                wire.send_frame(sock, {"ok": False, "error": {
                    "code": "NotFound", "message": f"not providing {service}"}})
            else:
                try:
                    result = handler(header.get("request"))
                    wire.send_frame(sock, {"ok": True, "result": result})
                except Exception as exc:
                    wire.send_frame(sock, {"ok": False, "error": {
                        "code": "RemoteError", "message": str(exc)}})
        except OSError:
            pass
        finally:
            sock.close()


def init_node(default_name: str, env=None, *, argv=None, master_uri=None,
              hostname=None, namespace=None, name=None, host_table=None,
              connect_timeout: float = 2.0) -> NodeSession:
    """Configure from environment and overrides, register with the master."""
    config = build_config(default_name, env, argv=argv, master_uri=master_uri,
                          hostname=hostname, namespace=namespace, name=name,
                          host_table=host_table)
    return NodeSession(config, connect_timeout=connect_timeout)


def master_request(master_uri: str, method: str, params: dict | None = None,
                   timeout: float = 5.0, host_table: HostTable | None = None):
    """One-shot request to the master without registering a node."""
    host, port = wire.parse_hostport(master_uri)
    try:
        ip = resolve_host(host, host_table)
        sock = wire.connect(ip, port, timeout=timeout)
    except OSError as exc:
        raise MasterUnreachable(f"cannot reach master at {master_uri}: {exc}") from exc
    channel = wire.LineChannel(sock)
    try:
        sock.settimeout(timeout)
        channel.send({"id": 1, "method": method, "params": params or {}})
        while True:
            response = channel.recv()
            if response is None:
                raise MasterUnreachable("master closed connection")
            if response.get("id") == 1:
                break
    except (OSError, ValueError) as exc:
        raise MasterUnreachable(f"master request failed: {exc}") from exc
    finally:
        channel.close()
    if response.get("ok"):
        return response.get("result")
    error = response.get("error") or {}
    if error.get("code") == "NotFound":
        raise NotFound(error.get("message", ""))
    raise RemoteError(f"{error.get('code')}: {error.get('message', '')}")

"""Deployment engine: runs resolved descriptions as trees of live components.

Deploy and start walk the tree parent-first; terminate undoes the recorded
start order exactly. A storage back-end prepares an image and boots its VM,
a domain pings the VM until it runs and then watches it, and a compound
tears all its members down when one of them dies.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .bidder import BidPolicy, NoAffordableHost, select_host
from .descriptor import (
    CLASS_ATTR, ROOT_NAME, ComponentDescription, DescriptorError, Reference, lookup,
)
from .directory import HostRecord
from .market import Bid, credit
from .simnet import At, Future, HostError, Service, SimHost, VmSpec, VmState, World, resolved

logger = logging.getLogger(__name__)

PING_INTERVAL = 2.0
BOOT_TIMEOUT = 60.0


class Kind(str, enum.Enum):
    COMPOUND = "COMPOUND"
    STORAGE_BACKEND = "STORAGE_BACKEND"
    DOMAIN = "DOMAIN"
    MARKET_DOMAIN = "MARKET_DOMAIN"


CLASS_KINDS = {
    "Compound": Kind.COMPOUND,
    "StorageBackend": Kind.STORAGE_BACKEND,
    "Domain": Kind.DOMAIN,
    "MarketDomain": Kind.MARKET_DOMAIN,
}


class NodeState(str, enum.Enum):
    INIT = "INIT"
    DEPLOYED = "DEPLOYED"
    STARTED = "STARTED"
    TERMINATED = "TERMINATED"
    FAILED = "FAILED"


LEGAL_EDGES = {
    NodeState.INIT: {NodeState.DEPLOYED, NodeState.FAILED},
    NodeState.DEPLOYED: {NodeState.STARTED, NodeState.TERMINATED, NodeState.FAILED},
    NodeState.STARTED: {NodeState.TERMINATED, NodeState.FAILED},
    NodeState.FAILED: {NodeState.TERMINATED},
    NodeState.TERMINATED: set(),
}


class LifecycleError(Exception):
    pass


class IllegalTransition(LifecycleError):
    pass


class DeployFailure(LifecycleError):
    pass


@dataclass(eq=False)
class LifecycleNode:
    path: Tuple[str, ...]
    description: ComponentDescription
    kind: Kind
    parent: Optional["LifecycleNode"] = None
    children: List["LifecycleNode"] = field(default_factory=list)
    state: NodeState = NodeState.INIT
    # Runtime bindings.
    host_id: Optional[str] = None
    vm_id: Optional[str] = None
    image_token: Optional[str] = None
    snapshot: Optional[bytes] = None
    terminating: bool = False
    monitor: Optional[object] = None
    failure: Optional[str] = None
    # Resolves once the node is TERMINATED; set when teardown of it begins.
    done: Optional[Future] = None
    # Resolves when an in-flight deploy step for the node settles.
    deploying: Optional[Future] = None

    @property
    def name(self) -> str:
        return ":".join((ROOT_NAME,) + self.path)

    @property
    def is_group(self) -> bool:
        return self.kind in (Kind.COMPOUND, Kind.MARKET_DOMAIN)

    def attr(self, name: str, default=None):
        return self.description.attributes.get(name, default)

    def preorder(self):
        yield self
        for child in self.children:
            yield from child.preorder()

    def __repr__(self) -> str:
        return f"<{self.kind.value} {self.name} {self.state.value}>"


def build_tree(description: ComponentDescription, path: Tuple[str, ...] = (),
               parent: Optional[LifecycleNode] = None) -> LifecycleNode:
    cls = description.sf_class
    if cls is None:
        raise LifecycleError(f"{':'.join((ROOT_NAME,) + path)}: missing {CLASS_ATTR}")
    if cls not in CLASS_KINDS:
        raise LifecycleError(f"{':'.join((ROOT_NAME,) + path)}: unknown {CLASS_ATTR} {cls!r}")
    node = LifecycleNode(path, description, CLASS_KINDS[cls], parent)
    for name, child in description.children.items():
        node.children.append(build_tree(child, path + (name,), node))
    if node.kind in (Kind.STORAGE_BACKEND, Kind.DOMAIN) and node.children:
        raise LifecycleError(f"{node.name}: {cls} cannot have child components")
    return node


class Deployment(Service):
    """One deployed description. Owns a bus endpoint for market traffic."""

    def __init__(self, world: World, description: ComponentDescription, deployment_id: str = "d1",
                 sls: str = "sls"):
        super().__init__(world.bus, f"deployer:{deployment_id}")
        self.world = world
        self.deployment_id = deployment_id
        self.sls = sls
        self.description = description
        self.root = build_tree(description)
        self.events: List[dict] = []
        self.deploy_order: List[LifecycleNode] = []
        self.start_order: List[LifecycleNode] = []
        self.terminate_order: List[LifecycleNode] = []
        self.finished = Future(f"{deployment_id}:finished")
        # Tops of teardowns in progress; nothing beneath them may start.
        self._stopping: List[LifecycleNode] = []
        world.services[self.endpoint] = self

    # -- helpers ----------------------------------------------------------
    def nodes(self) -> List[LifecycleNode]:
        return list(self.root.preorder())

    def node(self, name: str) -> LifecycleNode:
        for n in self.root.preorder():
            if n.name == name or ":".join(n.path) == name:
                return n
        raise KeyError(name)

    def states(self) -> Dict[str, str]:
        return {n.name: n.state.value for n in self.root.preorder()}

    def _transition(self, node: LifecycleNode, new: NodeState, **extra) -> None:
        old = node.state
        if new not in LEGAL_EDGES[old]:
            raise IllegalTransition(f"{node.name}: {old.value} -> {new.value}")
        node.state = new
        event = {"t": self.clock.now, "deployment": self.deployment_id, "node": node.name,
                 "old": old.value, "new": new.value, **extra}
        self.events.append(event)
        self.world.record("lifecycle", **{k: v for k, v in event.items() if k != "t"})
        if new is NodeState.DEPLOYED:
            self.deploy_order.append(node)
        elif new is NodeState.STARTED:
            self.start_order.append(node)
        elif new is NodeState.TERMINATED:
            self.terminate_order.append(node)
        if new is NodeState.TERMINATED and node.done is not None:
            node.done.resolve(True)
        if node is self.root and new is NodeState.TERMINATED:
            self.finished.resolve(self.root.failure)

    def _host(self, node: LifecycleNode) -> SimHost:
        host_id = node.host_id or node.attr("host")
        if not isinstance(host_id, str):
            raise DeployFailure(f"{node.name}: no host")
        try:
            host = self.world.host(host_id)
        except ValueError as exc:
            raise DeployFailure(f"{node.name}: {exc}") from None
        node.host_id = host_id
        return host

    def _resolve_lazy(self, node: LifecycleNode) -> None:
        for attr, value in list(node.description.attributes.items()):
            if isinstance(value, Reference) and value.lazy:
                try:
                    node.description.attributes[attr] = lookup(self.description, node.path, attr)
                except DescriptorError as exc:
                    raise DeployFailure(f"{node.name}: {exc}") from None

    def _vm_name(self, node: LifecycleNode) -> str:
        name = node.attr("vmName")
        if isinstance(name, str):
            return name
        holder = node.parent if node.parent is not None else node
        return holder.path[-1] if holder.path else ROOT_NAME

    def _vm_spec(self, node: LifecycleNode) -> VmSpec:
        """Disk layout from the back-end, runtime sizing from the paired domain."""
        domain = self._sibling(node, Kind.DOMAIN)
        sizing = domain.description.attributes if domain is not None else {}
        own = node.description.attributes
        try:
            return VmSpec(vcpus=int(sizing.get("vcpus", own.get("vcpus", 1))),
                          memory=int(sizing.get("memory", own.get("memory", 512))),
                          image=str(own.get("image", "default")),
                          disk=int(own.get("disk", 1024)), swap=int(own.get("swap", 0)))
        except (TypeError, ValueError) as exc:
            raise DeployFailure(f"{node.name}: bad VM spec: {exc}") from None

    def _sibling(self, node: LifecycleNode, kind: Kind) -> Optional[LifecycleNode]:
        if node.parent is None:
            return None
        name = self._vm_name(node)
        for sib in node.parent.children:
            if sib is not node and sib.kind is kind and self._vm_name(sib) == name:
                return sib
        return None

    def _vm_binding(self, node: LifecycleNode) -> Tuple[SimHost, str]:
        vm_id = node.attr("vmId")
        if isinstance(vm_id, str):
            node.vm_id = vm_id
            return self._host(node), vm_id
        parent = node.parent
        if parent is not None and parent.kind is Kind.MARKET_DOMAIN and parent.vm_id:
            node.host_id, node.vm_id = parent.host_id, parent.vm_id
            return self.world.host(parent.host_id), parent.vm_id
        backend = self._sibling(node, Kind.STORAGE_BACKEND)
        if backend is None or backend.vm_id is None:
            raise DeployFailure(f"{node.name}: no VM to monitor")
        node.host_id, node.vm_id = backend.host_id, backend.vm_id
        return self.world.host(backend.host_id), backend.vm_id

    # -- deploy -----------------------------------------------------------
    def deploy(self) -> Future:
        return self.world.spawn(self._deploy_tree(), name=f"{self.endpoint}:deploy").finished

    def start(self) -> Future:
        return self.world.spawn(self._start_tree(), name=f"{self.endpoint}:start").finished

    def run(self) -> Future:
        """Deploy, then start; resolves True once the whole tree is STARTED."""
        def both():
            ok = yield self.deploy()
            if not ok:
                return False
            ok = yield self.start()
            return ok
        return self.world.spawn(both(), name=f"{self.endpoint}:run").finished

    def _deploy_tree(self):
        for node in self.root.preorder():
            if node.state is not NodeState.INIT:
                continue
            if self._halted(node):
                return False
            node.deploying = Future(f"{node.name}:deploy")
            try:
                self._resolve_lazy(node)
                yield from self._deploy_node(node)
            except (DeployFailure, HostError) as exc:
                if self._halted(node):
                    # A teardown is already sweeping this subtree.
                    node.failure = str(exc)
                    self._transition(node, NodeState.FAILED, reason=str(exc))
                    node.deploying.resolve(False)
                    return False
                node.deploying.resolve(False)
                yield from self._deploy_failed(node, str(exc))
                return False
            self._transition(node, NodeState.DEPLOYED)
            node.deploying.resolve(True)
        return True

    def _deploy_node(self, node: LifecycleNode):
        if node.kind is Kind.STORAGE_BACKEND:
            host = self._host(node)
            node.snapshot = host.snapshot()
            node.image_token = f"{self.deployment_id}/{':'.join(node.path) or ROOT_NAME}"
            host.prepare_image(node.image_token, str(node.attr("image", "default")),
                               int(node.attr("disk", 1024)), int(node.attr("swap", 0)))
            delay = float(node.attr("prepareDelay", 0.0))
            if delay > 0:
                yield delay
        elif node.kind is Kind.MARKET_DOMAIN:
            yield from self._market_deploy(node)

    def _deploy_failed(self, node: LifecycleNode, reason: str):
        logger.info("%s: deploy of %s failed: %s", self.deployment_id, node.name, reason)
        node.failure = reason
        chain = []
        n = node
        while n is not None:
            if n.state is not NodeState.TERMINATED:
                self._transition(n, NodeState.FAILED, reason=reason if n is node else "child failed")
                chain.append(n)
            n = n.parent
        for done in reversed(list(self.deploy_order)):
            if done.state is NodeState.DEPLOYED:
                yield from self._terminate_node(done)
        for n in chain:
            yield from self._terminate_node(n)

    def market_domain_deploy(self, node: LifecycleNode):
        return self.world.spawn(self._market_deploy(node), name=f"{node.name}:market").finished

    def _market_deploy(self, node: LifecycleNode):
        attrs = node.description.attributes
        try:
            spec = VmSpec(vcpus=int(attrs.get("vcpus", 1)), memory=int(attrs.get("memory", 512)),
                          image=str(attrs.get("image", "default")), disk=int(attrs.get("disk", 1024)),
                          swap=int(attrs.get("swap", 0)))
            policy = BidPolicy(float(attrs["targetShare"]), credit(str(attrs["budget"])),
                               float(attrs["duration"]),
                               float(attrs.get("checkInterval", 5.0)), spec)
            account = str(attrs["account"])
        except (KeyError, ValueError, TypeError) as exc:
            raise DeployFailure(f"{node.name}: bad market parameters: {exc}") from None
        reply = yield self.request(self.sls, "sls.query", {"limit": int(attrs.get("queryLimit", 100))})
        if not reply.get("ok"):
            raise DeployFailure(f"{node.name}: directory unavailable: {reply.get('error')}")
        try:
            record = select_host(policy, [HostRecord.from_wire(h) for h in reply["hosts"]])
        except NoAffordableHost as exc:
            raise DeployFailure(f"{node.name}: {exc}") from None
        bid_id = f"{self.deployment_id}.{'.'.join(node.path) or ROOT_NAME}"
        bid = Bid(bid_id, account, policy.budget, policy.planned_duration, self.clock.now)
        reply = yield self.request(record.address, "auc.submit",
                                   {"bid": bid.to_wire(), "vm_spec": spec.to_wire()}, timeout=None)
        if not reply.get("ok"):
            raise DeployFailure(f"{node.name}: bid rejected by {record.host_id}: {reply.get('error')}")
        node.host_id = reply["host_id"]
        node.vm_id = reply["vm_id"]
        attrs["host"] = node.host_id
        attrs["vmId"] = node.vm_id
        attrs["bidId"] = bid_id

    # -- start ------------------------------------------------------------
    def _start_tree(self):
        ok = yield from self._start_node(self.root)
        return ok

    def _start_node(self, node: LifecycleNode):
        if node.state is not NodeState.DEPLOYED or self._halted(node):
            return False
        if node.kind is Kind.STORAGE_BACKEND:
            return self._start_backend(node)
        if node.kind is Kind.DOMAIN:
            ok = yield from self._start_domain(node)
            return ok
        self._transition(node, NodeState.STARTED)
        groups: List[Future] = []
        for child in node.children:
            if node.state is not NodeState.STARTED or self._halted(node):
                return False
            if child.is_group:
                groups.append(self.world.spawn(self._start_node(child), name=f"{child.name}:start").finished)
            else:
                ok = yield from self._start_node(child)
                if not ok:
                    return False
        for fut in groups:
            ok = yield fut
            if not ok:
                return False
        return node.state is NodeState.STARTED

    def _start_backend(self, node: LifecycleNode) -> bool:
        host = self._host(node)
        vm_id = f"{self.deployment_id}-{self._vm_name(node)}"
        try:
            host.create_vm(vm_id, self._vm_spec(node), owner=self.endpoint)
            node.vm_id = vm_id
            boot = node.attr("bootDelay")
            host.boot_vm(vm_id, None if boot is None else float(boot))
        except (HostError, DeployFailure) as exc:
            self.fail(node, f"boot failed: {exc}")
            return False
        self._transition(node, NodeState.STARTED, vm=vm_id)
        return True

    def _start_domain(self, node: LifecycleNode):
        try:
            host, vm_id = self._vm_binding(node)
        except (DeployFailure, ValueError) as exc:
            self.fail(node, str(exc))
            return False
        interval = float(node.attr("pingInterval", PING_INTERVAL))
        timeout = float(node.attr("bootTimeout", BOOT_TIMEOUT))
        t0 = self.clock.now
        k = 0
        while True:
            if node.state is not NodeState.DEPLOYED or self._halted(node):
                return False
            state = host.ping(vm_id)
            if state is VmState.RUNNING:
                break
            if state in (None, VmState.DEAD, VmState.TERMINATING):
                self.fail(node, f"vm {vm_id} died while booting")
                return False
            if self.clock.now - t0 >= timeout:
                self.fail(node, f"vm {vm_id} not running after {timeout:g}s")
                return False
            k += 1
            yield At(min(t0 + k * interval, t0 + timeout))
        self._transition(node, NodeState.STARTED, vm=vm_id)
        node.monitor = self.world.spawn(self._monitor(node, host, vm_id, interval),
                                        name=f"{node.name}:monitor")
        return True

    def _monitor(self, node: LifecycleNode, host: SimHost, vm_id: str, interval: float):
        t0 = self.clock.now
        k = 0
        while node.state is NodeState.STARTED and not node.terminating:
            k += 1
            yield At(t0 + k * interval)
            if node.state is not NodeState.STARTED or node.terminating:
                return
            if host.ping(vm_id) is not VmState.RUNNING:
                self.on_vm_death(node)
                return

    # -- failure ----------------------------------------------------------
    def on_vm_death(self, node: LifecycleNode) -> None:
        """Liveness check found the VM gone: clean it up and tell the parent."""
        if node.state is not NodeState.STARTED or node.terminating:
            return
        self.fail(node, f"vm {node.vm_id} died")

    def fail(self, node: LifecycleNode, reason: str) -> Future:
        """Mark `node` FAILED and tear down what it takes with it.

        Failure climbs through enclosing compounds; the outermost failed
        compound is then terminated as a whole, in reverse start order.
        Under any other parent only the failed subtree goes.
        """
        if node.terminating or node.state in (NodeState.FAILED, NodeState.TERMINATED):
            return resolved(None)
        logger.info("%s: %s failed: %s", self.deployment_id, node.name, reason)
        node.failure = reason
        self._transition(node, NodeState.FAILED, reason=reason)
        if node.kind is Kind.DOMAIN:
            # The dead VM is cleared right away; its node terminates in order below.
            try:
                self._release_vm(node)
            except (HostError, ValueError) as exc:
                logger.warning("%s: releasing vm of %s: %s", self.deployment_id, node.name, exc)
        top = node
        parent = node.parent
        while parent is not None and parent.kind is Kind.COMPOUND and not parent.terminating \
                and parent.state in (NodeState.DEPLOYED, NodeState.STARTED):
            parent.failure = f"child {top.name} failed"
            self._transition(parent, NodeState.FAILED, reason=parent.failure)
            top = parent
            parent = parent.parent
        if top.parent is not None and self._halted(top.parent):
            return resolved(None)
        return self.world.spawn(self._terminate_subtree(top), name=f"{top.name}:teardown").finished

    def _halted(self, node: LifecycleNode) -> bool:
        """A teardown covers `node`, or an enclosing compound already failed."""
        n = node
        while n is not None:
            if n in self._stopping:
                return True
            if n is not node and n.kind is Kind.COMPOUND and n.state is NodeState.FAILED:
                return True
            n = n.parent
        return False

    # -- terminate --------------------------------------------------------
    def terminate(self) -> Future:
        return self.world.spawn(self._terminate_subtree(self.root),
                                name=f"{self.endpoint}:terminate").finished

    def teardown_order(self, top: LifecycleNode) -> List[LifecycleNode]:
        """Started members in reverse start order; the rest just before their parent."""
        members = list(top.preorder())
        order = [n for n in reversed(self.start_order) if n in members and n is not top]
        order.append(top)
        for n in reversed(members):
            if n in order:
                continue
            anchor = n.parent
            while anchor not in order:
                anchor = anchor.parent
            order.insert(order.index(anchor), n)
        return order

    def _terminate_subtree(self, top: LifecycleNode):
        self._stopping.append(top)
        for node in self.teardown_order(top):
            yield from self._terminate_node(node)

    def _terminate_node(self, node: LifecycleNode):
        if node.state is NodeState.INIT and node.deploying is not None:
            yield node.deploying
        if node.state in (NodeState.INIT, NodeState.TERMINATED):
            return
        if node.terminating:
            # Another teardown owns this node; wait so order holds across both.
            yield node.done
            return
        node.terminating = True
        node.done = Future(f"{node.name}:terminated")
        if node.monitor is not None:
            node.monitor.kill()
        try:
            if node.kind is Kind.DOMAIN:
                self._release_vm(node)
            elif node.kind is Kind.STORAGE_BACKEND:
                self._release_vm(node)
                delay = float(node.attr("cleanupDelay", 0.0))
                if delay > 0:
                    yield delay
                if node.host_id and node.image_token:
                    self.world.host(node.host_id).release_image(node.image_token)
            elif node.kind is Kind.MARKET_DOMAIN:
                self._release_vm(node)
        except (HostError, ValueError) as exc:
            logger.warning("%s: terminate of %s: %s", self.deployment_id, node.name, exc)
        extra = {}
        if node.kind is Kind.STORAGE_BACKEND and node.snapshot is not None:
            extra["restored"] = self.world.host(node.host_id).snapshot() == node.snapshot
        self._transition(node, NodeState.TERMINATED, **extra)

    def _release_vm(self, node: LifecycleNode) -> None:
        if node.host_id and node.vm_id:
            self.world.host(node.host_id).remove_vm(node.vm_id)


class Engine:
    """Registry of deployments in one world."""

    def __init__(self, world: World, sls: str = "sls"):
        self.world = world
        self.sls = sls
        self.deployments: Dict[str, Deployment] = {}

    def deploy(self, description: ComponentDescription, deployment_id: Optional[str] = None) -> Deployment:
        deployment_id = deployment_id or f"d{len(self.deployments) + 1}"
        if deployment_id in self.deployments:
            raise LifecycleError(f"deployment {deployment_id} exists")
        dep = Deployment(self.world, description, deployment_id, sls=self.sls)
        self.deployments[deployment_id] = dep
        dep.run()
        return dep

    def terminate(self, deployment_id: str) -> Future:
        return self.get(deployment_id).terminate()

    def get(self, deployment_id: str) -> Deployment:
        try:
            return self.deployments[deployment_id]
        except KeyError:
            raise LifecycleError(f"unknown deployment {deployment_id}") from None


def check_trace_order(events: List[dict], tree: LifecycleNode) -> List[str]:
    """Ordering violations in a lifecycle event trace; empty when sound.

    Deploy and start must be parent-first with siblings in declaration
    order, and terminate must run the start order exactly backwards.
    """
    problems: List[str] = []
    seen: Dict[Tuple[str, str], int] = {}
    for i, ev in enumerate(events):
        seen.setdefault((ev["node"], ev["new"]), i)
    nodes = list(tree.preorder())
    for phase in ("DEPLOYED", "STARTED"):
        for n in nodes:
            idx = seen.get((n.name, phase))
            if idx is None:
                continue
            if n.parent is not None:
                pidx = seen.get((n.parent.name, phase))
                if pidx is None or pidx > idx:
                    problems.append(f"{phase}: {n.name} before its parent")
        for n in nodes:
            kids = [seen.get((c.name, phase)) for c in n.children]
            present = [k for k in kids if k is not None]
            if present != sorted(present):
                problems.append(f"{phase}: children of {n.name} out of order")
    for n in nodes:
        d, s, t = (seen.get((n.name, p)) for p in ("DEPLOYED", "STARTED", "TERMINATED"))
        if s is not None and (d is None or d > s):
            problems.append(f"{n.name}: started before deployed")
        if t is not None and s is not None and s > t:
            problems.append(f"{n.name}: terminated before started")
        if t is not None and n.parent is not None:
            pt = seen.get((n.parent.name, "TERMINATED"))
            if pt is not None and pt < t:
                problems.append(f"{n.name}: terminated after its parent")
    started = [ev["node"] for ev in events if ev["new"] == "STARTED"]
    terminated = [ev["node"] for ev in events if ev["new"] == "TERMINATED" and ev["node"] in started]
    # A partial teardown must still follow the reversed start order.
    backwards = [n for n in reversed(started) if n in set(terminated)]
    if terminated != backwards:
        problems.append(f"terminate order {terminated} is not the reverse of start order {started}")
    return problems

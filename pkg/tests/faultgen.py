"""Descriptor builders and seeded fault runs shared by lifecycle checks."""

import random

from agora import descriptor
from agora.lifecycle import Engine
from agora.simnet import World

PAIR = """
Pair extends Compound {
  backend extends StorageBackend {
    host ATTRIB host;
    prepareDelay %(prep)s;
    cleanupDelay %(clean)s;
  }
  domain extends Domain {
    host ATTRIB host;
    pingInterval %(ping)s;
    bootTimeout %(timeout)s;
  }
}
"""


def pair_doc(body, prep=0.0, clean=0.0, ping=2.0, timeout=60.0):
    text = PAIR % dict(prep=prep, clean=clean, ping=ping, timeout=timeout) + body
    return descriptor.resolve(descriptor.parse(text))


def single(**kw):
    return pair_doc('sfConfig extends Pair { host "h1"; }', **kw)


def deploy(world, doc, dep_id="d1"):
    return Engine(world).deploy(doc, dep_id)


def random_run(seed):
    rng = random.Random(seed)
    world = World(seed=seed)
    hosts = [f"h{i}" for i in range(rng.randint(1, 3))]
    for h in hosts:
        world.add_host(h, boot_delay=rng.choice([0.5, 2.0, 5.0, 70.0]), memory_total=8192)
    before = {h: world.hosts[h].snapshot() for h in hosts}
    pairs = " ".join(f'p{i} extends Pair {{ host "{rng.choice(hosts)}"; }}'
                     for i in range(rng.randint(1, 4)))
    doc = pair_doc(f"sfConfig extends Compound {{ {pairs} }}",
                   prep=rng.choice([0.0, 1.0]), clean=rng.choice([0.0, 2.0]),
                   ping=rng.choice([1.0, 2.0]), timeout=rng.choice([10.0, 60.0]))
    dep = deploy(world, doc)
    for _ in range(rng.randint(0, 3)):
        world.advance(world.now + rng.uniform(0, 20))
        vms = [(h, v) for h in hosts for v in world.hosts[h].vms]
        if vms:
            h, v = rng.choice(vms)
            world.inject_fault("VM_KILL", f"{h}/{v}")
    if rng.random() < 0.5:
        world.advance(world.now + rng.uniform(0, 30))
        dep.terminate()
    world.advance(world.now + 200)
    dep.terminate()
    world.advance(world.now + 200)
    return world, dep, before

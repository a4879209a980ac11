"""MuJoCo-compatible MJCF emission of the lumped actuator structure.

Each actuator becomes a body chain hanging off its attach_a link: a hinge
mount (`muscleX_uRotJoint`) carrying m/6, then two slide joints, each with
stiffness 2k, damping 2c and spring reference l0/2, carrying 2m/3 and m/6.
A `<equality><joint>` element ties the two slide joints together and a
`<equality><connect>` element ties the last body to the attach_b link.  The
two `<general>` actuators per muscle share one force channel: drive them
with the same control signal (positive control = extensile force, doing
positive work on elongation).

Emission is a pure function of the description; golden comparisons
canonicalize attribute order and float formatting (%.9g), so whitespace or
formatting drift never breaks them.
"""

from __future__ import annotations

import io
import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

from .errors import NameCollision, ValidationError
from .model import RobotDescription
from .model import _validate as _validate_description

_HEADER_COMMENT = (
    " lumped elastic actuators: drive both <general> channels of each muscle "
    "with one shared control signal; positive control extends the muscle "
)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _vec(*xs: float) -> str:
    return " ".join(_fmt(x) for x in xs)


@dataclass(frozen=True)
class MjcfDocument:
    text: str

    def root(self) -> ET.Element:
        return ET.fromstring(self.text)


def emit_mjcf(desc: RobotDescription, model_name: str = "robot") -> MjcfDocument:
    """Emit the description as MJCF XML realizing the 3-2-1 structure."""
    _validate_description(desc)

    child_of = {j.child: j for j in desc.joints}
    link_ids = [l.id for l in desc.links]
    root_link = next(lid for lid in link_ids if lid not in child_of)
    shift = {root_link: np.zeros(2)}
    for joint in desc.joints:
        shift[joint.child] = np.asarray(joint.child_point, float)

    names: set[str] = set()

    def register(name: str) -> str:
        if name in names:
            raise NameCollision(f"duplicate MJCF name {name!r}")
        names.add(name)
        return name

    mj = ET.Element("mujoco", {"model": model_name})
    mj.append(ET.Comment(_HEADER_COMMENT))
    ET.SubElement(mj, "compiler", {"angle": "radian"})
    ET.SubElement(
        mj, "option", {"timestep": "0.005", "gravity": _vec(0.0, -desc.gravity, 0.0)}
    )
    world = ET.SubElement(mj, "worldbody")

    bodies: dict[str, ET.Element] = {}

    def link_body(link_id: str) -> ET.Element:
        if link_id in bodies:
            return bodies[link_id]
        link = desc.links[desc.link_index(link_id)]
        if link_id == root_link:
            parent_el = world
            pos = np.zeros(2)
        else:
            joint = child_of[link_id]
            parent_el = link_body(joint.parent)
            pos = np.asarray(joint.parent_point, float) - shift[joint.parent]
        el = ET.SubElement(
            parent_el, "body", {"name": register(link_id), "pos": _vec(pos[0], pos[1], 0.0)}
        )
        if link_id != root_link:
            joint = child_of[link_id]
            ET.SubElement(
                el,
                "joint",
                {
                    "name": register(joint.id),
                    "type": "hinge",
                    "pos": "0 0 0",
                    "axis": "0 0 1",
                    "limited": "true",
                    "range": _vec(joint.limits[0], joint.limits[1]),
                    "damping": _fmt(joint.damping),
                },
            )
        com = np.asarray(link.com, float) - shift[link_id]
        half = max(link.rod_length / 2.0, 0.01)
        ET.SubElement(
            el,
            "geom",
            {
                "name": register(f"{link_id}_geom"),
                "type": "capsule",
                "fromto": _vec(com[0] + half, com[1], 0.0, com[0] - half, com[1], 0.0),
                "size": "0.008",
                "mass": _fmt(link.mass),
            },
        )
        bodies[link_id] = el
        return el

    for lid in link_ids:
        link_body(lid)

    equality = ET.Element("equality")
    actuator_el = ET.Element("actuator")

    for act in desc.actuators:
        m1 = act.m / 6.0
        m2 = 2.0 * act.m / 3.0
        k_seg = 2.0 * act.k
        c_seg = 2.0 * act.c
        ref = act.l0 / 2.0
        prefix = f"muscle{act.id}"
        parent_el = bodies[act.attach_a.link]
        pa = np.asarray(act.attach_a.point, float) - shift[act.attach_a.link]
        u_link = ET.SubElement(
            parent_el,
            "body",
            {"name": register(f"{prefix}_uLink"), "pos": _vec(pa[0], pa[1], 0.0)},
        )
        ET.SubElement(
            u_link,
            "joint",
            {
                "name": register(f"{prefix}_uRotJoint"),
                "type": "hinge",
                "pos": "0 0 0",
                "axis": "0 0 1",
            },
        )
        ET.SubElement(
            u_link,
            "geom",
            {
                "name": register(f"{prefix}_uGeom"),
                "type": "capsule",
                "fromto": "0 0 0 0.012 0 0",
                "size": "0.004",
                "mass": _fmt(m1),
            },
        )
        m_link = ET.SubElement(
            u_link, "body", {"name": register(f"{prefix}_mLink"), "pos": "0 0 0"}
        )
        slide_attrs = {
            "type": "slide",
            "pos": "0 0 0",
            "axis": "1 0 0",
            "stiffness": _fmt(k_seg),
            "damping": _fmt(c_seg),
            "springref": _fmt(ref),
        }
        ET.SubElement(
            m_link, "joint", {"name": register(f"{prefix}_mSlideJoint"), **slide_attrs}
        )
        ET.SubElement(
            m_link,
            "geom",
            {
                "name": register(f"{prefix}_mGeom"),
                "type": "capsule",
                "fromto": "0 0 0 0.012 0 0",
                "size": "0.004",
                "mass": _fmt(m2),
            },
        )
        l_link = ET.SubElement(
            m_link, "body", {"name": register(f"{prefix}_lLink"), "pos": "0 0 0"}
        )
        ET.SubElement(
            l_link, "joint", {"name": register(f"{prefix}_lSlideJoint"), **slide_attrs}
        )
        ET.SubElement(
            l_link,
            "geom",
            {
                "name": register(f"{prefix}_lGeom"),
                "type": "capsule",
                "fromto": "0 0 0 0.012 0 0",
                "size": "0.004",
                "mass": _fmt(m1),
            },
        )

        ET.SubElement(
            equality,
            "joint",
            {
                "joint1": f"{prefix}_mSlideJoint",
                "joint2": f"{prefix}_lSlideJoint",
                "polycoef": "0 1 0 0 0",
            },
        )
        pb = np.asarray(act.attach_b.point, float) - shift[act.attach_b.link]
        ET.SubElement(
            equality,
            "connect",
            {
                "body1": f"{prefix}_lLink",
                "body2": act.attach_b.link,
                "anchor": _vec(pb[0], pb[1], 0.0),
            },
        )
        for seg in ("m", "l"):
            ET.SubElement(
                actuator_el,
                "general",
                {
                    "name": register(f"{prefix}_{seg}Force"),
                    "joint": f"{prefix}_{seg}SlideJoint",
                    "gainprm": "1 0 0",
                },
            )

    mj.append(equality)
    mj.append(actuator_el)
    _check_equality_refs(mj)
    buf = io.BytesIO()
    ET.indent(ET.ElementTree(mj), space="  ")
    ET.ElementTree(mj).write(buf, encoding="utf-8", xml_declaration=True)
    return MjcfDocument(buf.getvalue().decode("utf-8") + "\n")


def _check_equality_refs(mj: ET.Element) -> None:
    joints = {el.get("name") for el in mj.iter("joint")}
    bodies = {el.get("name") for el in mj.iter("body")}
    for el in mj.find("equality"):
        if el.tag == "joint":
            for key in ("joint1", "joint2"):
                if el.get(key) not in joints:
                    raise ValidationError(f"equality references unknown joint {el.get(key)!r}")
        elif el.tag == "connect":
            for key in ("body1", "body2"):
                if el.get(key) not in bodies:
                    raise ValidationError(f"equality references unknown body {el.get(key)!r}")


def _canon_value(value: str) -> str:
    parts = value.split()
    out = []
    for part in parts:
        try:
            out.append(f"{float(part):.9g}")
        except ValueError:
            return value
    return " ".join(out)


def _canon_element(el: ET.Element, lines: list[str], depth: int) -> None:
    attrs = " ".join(
        f'{k}="{_canon_value(el.attrib[k])}"' for k in sorted(el.attrib)
    )
    pad = "  " * depth
    head = f"{pad}<{el.tag}{' ' + attrs if attrs else ''}"
    children = list(el)
    if children:
        lines.append(head + ">")
        for child in children:
            _canon_element(child, lines, depth + 1)
        lines.append(f"{pad}</{el.tag}>")
    else:
        lines.append(head + "/>")


def canonicalize(text: str) -> str:
    """Stable serialization: sorted attributes, %.9g floats, fixed indent."""
    root = ET.fromstring(text)
    lines: list[str] = []
    _canon_element(root, lines, 0)
    return "\n".join(lines) + "\n"


def golden_diff(doc: MjcfDocument | str, golden_text: str) -> str | None:
    """None when canonically equal; otherwise a structural diff summary."""
    text = doc.text if isinstance(doc, MjcfDocument) else doc
    a = canonicalize(text).splitlines()
    b = canonicalize(golden_text).splitlines()
    for i, (la, lb) in enumerate(zip(a, b)):
        if la != lb:
            return f"line {i + 1}:\n  emitted:  {la.strip()}\n  golden:   {lb.strip()}"
    if len(a) != len(b):
        return f"length mismatch: emitted {len(a)} lines, golden {len(b)} lines"
    return None


def golden_check(doc: MjcfDocument | str, golden_path) -> bool:
    """True iff the document matches the golden file after canonicalization."""
    with open(golden_path, "r") as fh:
        golden_text = fh.read()
    return golden_diff(doc, golden_text) is None

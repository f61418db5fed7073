"""
ReadLens explanation sheets.

One explained instance becomes a printable page: a Markdown summary is
rendered to HTML with mistune, the HTML is turned into reportlab paragraphs,
and the enhanced heatmap is embedded as a vector drawing. The sheet is
rendered with the largest font and spacing that keep it within the layout's
page limit; page counts come from the rendered PDF itself (PyPDF2).
"""

import io
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import mistune
import numpy as np
from PyPDF2 import PdfReader
from reportlab.graphics.shapes import Drawing, Group
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer

from errors import ValidationError
from storage import atomic_write_bytes

MAX_FONT = 12.0
MIN_FONT = 6.0
FONT_STEP = 0.5
MAX_SPACING = 0.85
MIN_SPACING = 0.6
SPACING_STEP = 0.1
TOP_TOKENS = 5


class SheetTooLongError(ValidationError):
    """The sheet does not fit its page limit even at minimum font and spacing."""


@dataclass(frozen=True)
class SheetLayout:
    name: str
    page_size: Tuple[float, float]
    margin: float
    max_pages: int

    @classmethod
    def named(cls, name: str, max_pages: Optional[int] = None) -> "SheetLayout":
        if name == "letter":
            return cls("letter", letter, 0.75 * inch, max_pages or 2)
        if name == "card":
            # index cards are used landscape: 6" wide x 4" tall
            return cls("card", (6 * inch, 4 * inch), 0.1 * inch, max_pages or 2)
        raise ValidationError(f"layout must be 'letter' or 'card', got {name!r}")

    @property
    def frame(self) -> Tuple[float, float]:
        width, height = self.page_size
        return width - 2 * self.margin, height - 2 * self.margin


def explanation_markdown(instance, result, highlights: Sequence[int], predicted: int) -> str:
    """Markdown summary of one explained instance."""
    passage_len = result.passage_span[1] - result.passage_span[0]
    passage = list(instance.passage[:passage_len])
    marked = set(highlights)
    lines = [f"# Explanation for {instance.id}", "",
             f"**Question:** {' '.join(instance.question)}", "", "## Options", ""]
    for index, option in enumerate(instance.options):
        tags = []
        if index == instance.answer:
            tags.append("gold")
        if index == predicted:
            tags.append("predicted")
        suffix = f" ({', '.join(tags)})" if tags else ""
        lines.append(f"- {chr(ord('A') + index)}. {' '.join(option)}{suffix}")
    lines += ["", "## Passage", "",
              " ".join(f"**{tok}**" if i in marked else tok for i, tok in enumerate(passage)), "",
              "## Top attributed tokens", ""]
    start = result.passage_span[0]
    passage_scores = np.asarray(result.scores[start:start + len(passage)])
    ranked = sorted(range(len(passage)), key=lambda i: (-passage_scores[i], i))
    for rank, i in enumerate(ranked[:TOP_TOKENS], start=1):
        lines.append(f"{rank}. {passage[i]} (position {i}, score {passage_scores[i]:.3f})")
    if result.degenerate:
        lines += ["", "*Attribution is constant across tokens, so every score is zero.*"]
    return "\n".join(lines) + "\n"


def _styles(font: float, spacing: float):
    base = getSampleStyleSheet()
    body = ParagraphStyle("SheetBody", parent=base["Normal"], fontSize=font,
                          leading=font * max(1.1, 1.3 * spacing), spaceAfter=max(2, font * 0.6 * spacing))
    h1 = ParagraphStyle("SheetH1", parent=base["Heading1"], fontSize=font + 4,
                        leading=(font + 4) * 1.2, spaceAfter=(font + 4) * 0.8 * spacing,
                        spaceBefore=0)
    h2 = ParagraphStyle("SheetH2", parent=base["Heading2"], fontSize=font + 2,
                        leading=(font + 2) * 1.2, spaceAfter=(font + 2) * 0.8 * spacing,
                        spaceBefore=(font + 2) * 0.9 * spacing)
    return body, h1, h2


def html_to_flowables(html: str, body: ParagraphStyle, h1: ParagraphStyle,
                      h2: ParagraphStyle) -> list:
    """Turn mistune's line-per-block HTML into reportlab paragraphs."""
    flowables = []
    in_ol, counter = False, 0
    for line in html.split("\n"):
        line = line.strip()
        if not line:
            continue
        line = (line.replace("<strong>", "<b>").replace("</strong>", "</b>")
                    .replace("<em>", "<i>").replace("</em>", "</i>"))
        if line in ("<ul>", "</ul>"):
            continue
        if line == "<ol>":
            in_ol, counter = True, 0
            continue
        if line == "</ol>":
            in_ol = False
            continue
        if line.startswith("<h1>"):
            flowables.append(Paragraph(re.sub(r"</?h1>", "", line), h1))
        elif line.startswith("<h2>") or line.startswith("<h3>"):
            flowables.append(Paragraph(re.sub(r"</?h[23]>", "", line), h2))
        elif line.startswith("<li>"):
            text = re.sub(r"</?li>", "", line)
            if in_ol:
                counter += 1
                text = f"{counter}. {text}"
            else:
                text = f"• {text}"
            flowables.append(Paragraph(text, body))
        else:
            flowables.append(Paragraph(re.sub(r"</?p>", "", line), body))
    return flowables


def fit_drawing(drawing: Drawing, width: float, height: float) -> Drawing:
    """Scaled copy of a drawing that fits within width x height."""
    factor = min(1.0, width / drawing.width, height / drawing.height)
    holder = Drawing(drawing.width * factor, drawing.height * factor)
    group = Group(*drawing.contents)
    group.scale(factor, factor)
    holder.add(group)
    return holder


def count_pdf_pages(pdf: bytes) -> int:
    return len(PdfReader(io.BytesIO(pdf)).pages)


class ExplanationSheet:
    """Auto-fitting PDF renderer for explanation sheets."""

    def __init__(self, layout: SheetLayout, debug: bool = False):
        self.layout = layout
        self.debug = debug
        self.final_font: Optional[float] = None
        self.final_spacing: Optional[float] = None

    def render(self, markdown: str, drawing: Optional[Drawing], font: float, spacing: float) -> bytes:
        body, h1, h2 = _styles(font, spacing)
        html = mistune.create_markdown(renderer="html")(markdown)
        story: List = html_to_flowables(html, body, h1, h2)
        if drawing is not None:
            width, height = self.layout.frame
            story.append(Spacer(1, font * spacing))
            story.append(fit_drawing(drawing, width, height * 0.9))
        buffer = io.BytesIO()
        doc = SimpleDocTemplate(buffer, pagesize=self.layout.page_size,
                                leftMargin=self.layout.margin, rightMargin=self.layout.margin,
                                topMargin=self.layout.margin, bottomMargin=self.layout.margin,
                                invariant=1, title="ReadLens explanation")
        doc.build(story)
        return buffer.getvalue()

    def build(self, markdown: str, drawing: Optional[Drawing], out_path) -> Path:
        """Render with the largest settings that fit, shrinking spacing before font."""
        font, spacing = MAX_FONT, MAX_SPACING
        while True:
            pdf = self.render(markdown, drawing, font, spacing)
            pages = count_pdf_pages(pdf)
            if self.debug:
                print(f"[sheet] font={font:.1f}pt spacing={spacing:.2f} -> {pages} page(s)",
                      file=sys.stderr)
            if pages <= self.layout.max_pages:
                self.final_font, self.final_spacing = font, spacing
                return atomic_write_bytes(out_path, pdf)
            if spacing > MIN_SPACING + 1e-9:
                spacing = max(MIN_SPACING, round(spacing - SPACING_STEP, 2))
            elif font > MIN_FONT:
                font = max(MIN_FONT, font - FONT_STEP)
            else:
                raise SheetTooLongError(
                    f"explanation needs {pages} pages on the {self.layout.name} layout even at "
                    f"{MIN_FONT}pt and spacing {MIN_SPACING}; the limit is {self.layout.max_pages}")

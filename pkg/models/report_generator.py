import logging
import os
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import matplotlib
matplotlib.use('Agg')  # Use non-interactive backend
import matplotlib.pyplot as plt
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
from reportlab.lib.units import inch
from reportlab.platypus import SimpleDocTemplate, Table, TableStyle, Paragraph, Spacer
from reportlab.platypus import Image as RLImage

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HEADER_BLUE = '#2E86AB'
CATEGORY_LABELS = ['Land (0)', 'Water (1)']
THUMBNAILS = [('labels', 'Label map'), ('stylized_0', 'Land style'),
              ('stylized_1', 'Water style'), ('collage', 'Collage')]


class RunReportPDF:
    """Renders a RunReport as a PDF: stages, histogram, losses, loss curves and thumbnails"""

    def __init__(self):
        self.styles = getSampleStyleSheet()
        self.title_style = ParagraphStyle(
            'CustomTitle',
            parent=self.styles['Heading1'],
            fontSize=18,
            spaceAfter=30,
            alignment=1  # Center alignment
        )
        self.heading_style = ParagraphStyle(
            'CustomHeading',
            parent=self.styles['Heading2'],
            fontSize=14,
            spaceAfter=12,
            textColor=colors.HexColor(HEADER_BLUE)
        )

    def generate(self, report, pdf_path: PathLike) -> Dict[str, Any]:
        """
        Write the PDF for a finished run

        Args:
            report: RunReport with stages, histogram, losses, artifacts and traces
            pdf_path: Destination file

        Returns:
            Dictionary with the PDF path and size
        """
        pdf_path = Path(pdf_path)
        pdf_path.parent.mkdir(parents=True, exist_ok=True)
        doc = SimpleDocTemplate(str(pdf_path), pagesize=A4, topMargin=0.5 * inch)
        story = []

        story.append(Paragraph("ArtMap Run Report", self.title_style))
        report_date = datetime.now().strftime("%B %d, %Y at %I:%M %p")
        meta_text = (f"<b>Generated:</b> {report_date}<br/>"
                     f"<b>Version:</b> {report.version}<br/>"
                     f"<b>Seed:</b> {report.config.get('seed', 'N/A')}")
        story.append(Paragraph(meta_text, self.styles['Normal']))
        story.append(Spacer(1, 20))

        story.append(Paragraph("Stage Timings", self.heading_style))
        story.append(self._stage_table(report.stages))
        story.append(Spacer(1, 15))

        story.append(Paragraph("Label Histogram", self.heading_style))
        story.append(self._histogram_table(report.histogram))
        story.append(Spacer(1, 15))

        story.append(Paragraph("Final Losses", self.heading_style))
        story.append(self._loss_table(report.final_losses))
        story.append(Spacer(1, 15))

        chart_path = self._loss_chart(report.traces)
        if chart_path:
            story.append(Paragraph("Loss Curves", self.heading_style))
            story.append(RLImage(chart_path, width=6 * inch, height=3 * inch))
            story.append(Spacer(1, 15))

        thumbnails = self._thumbnail_table(report.artifacts)
        if thumbnails is not None:
            story.append(Paragraph("Artifacts", self.heading_style))
            story.append(thumbnails)

        doc.build(story)

        if chart_path and os.path.exists(chart_path):
            os.remove(chart_path)

        logger.info("Wrote PDF report %s", pdf_path)
        return {
            'pdf_path': str(pdf_path),
            'file_size': pdf_path.stat().st_size if pdf_path.exists() else 0,
        }

    def _styled_table(self, rows: List[List[str]], col_widths: List[float], align: str = 'LEFT') -> Table:
        table = Table(rows, colWidths=col_widths)
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor(HEADER_BLUE)),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('ALIGN', (0, 0), (-1, -1), align),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, 0), 11),
            ('BOTTOMPADDING', (0, 0), (-1, 0), 10),
            ('BACKGROUND', (0, 1), (-1, -1), colors.beige),
            ('GRID', (0, 0), (-1, -1), 1, colors.black)
        ]))
        return table

    def _stage_table(self, stages: List[Dict[str, Any]]) -> Table:
        rows = [['Stage', 'Wall time (s)']]
        rows += [[s['name'], f"{s['seconds']:.2f}"] for s in stages]
        return self._styled_table(rows, [3 * inch, 1.5 * inch])

    def _histogram_table(self, histogram: List[int]) -> Table:
        total = sum(histogram) or 1
        rows = [['Category', 'Pixels', 'Share (%)']]
        for label, count in zip(CATEGORY_LABELS, histogram):
            rows.append([label, str(count), f"{100.0 * count / total:.1f}"])
        return self._styled_table(rows, [2 * inch, 1.5 * inch, 1.5 * inch], align='CENTER')

    def _loss_table(self, final_losses: Dict[str, Optional[Dict[str, float]]]) -> Table:
        rows = [['Category', 'Total', 'Content', 'Style']]
        for key, label in zip(('0', '1'), CATEGORY_LABELS):
            losses = final_losses.get(key)
            if losses is None:
                rows.append([label, 'not present', '', ''])
            else:
                rows.append([label] + [f"{losses[k]:.4g}" for k in ('total', 'content', 'style')])
        return self._styled_table(rows, [1.8 * inch, 1.4 * inch, 1.4 * inch, 1.4 * inch], align='CENTER')

    def _loss_chart(self, traces) -> Optional[str]:
        """Plot total loss per iteration for each category and return the image path"""
        if not any(len(t) for t in traces):
            return None

        try:
            plt.figure(figsize=(10, 5))
            for label, trace, color in zip(CATEGORY_LABELS, traces, ['#6b8e23', '#2f6db3']):
                if not len(trace):
                    continue
                frame = trace.to_frame()
                plt.plot(frame['iter'], frame['total'], label=label, color=color)
            plt.yscale('log')
            plt.title('Style transfer objective', fontsize=16, fontweight='bold')
            plt.xlabel('Iteration', fontsize=12)
            plt.ylabel('Total loss', fontsize=12)
            plt.legend()
            plt.tight_layout()

            fd, chart_path = tempfile.mkstemp(prefix="artmap_losses_", suffix=".png")
            os.close(fd)
            plt.savefig(chart_path, dpi=150, bbox_inches='tight')
            plt.close()
            return chart_path

        except Exception as e:
            logger.warning("Error creating loss chart: %s", e)
            plt.close('all')
            return None

    def _thumbnail_table(self, artifacts: Dict[str, str]) -> Optional[Table]:
        images, captions = [], []
        for key, caption in THUMBNAILS:
            path = artifacts.get(key)
            if path and os.path.exists(path):
                images.append(RLImage(path, width=1.5 * inch, height=1.5 * inch))
                captions.append(caption)
        if not images:
            return None
        table = Table([images, captions])
        table.setStyle(TableStyle([('ALIGN', (0, 0), (-1, -1), 'CENTER')]))
        return table

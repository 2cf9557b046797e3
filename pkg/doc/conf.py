#!/usr/bin/env python3
# -*- coding: utf-8 -*-
#
# ICGE-Align documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import sys, os, re

sys.path.insert(0, os.path.abspath(".."))

# -- General configuration ------------------------------------------------

needs_sphinx = "1.6"

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.todo",
    "sphinx.ext.coverage",
    "sphinx.ext.mathjax",
    "sphinx.ext.napoleon",
    "sphinx.ext.intersphinx",
    "sphinx.ext.viewcode",
    "sphinx_automodapi.automodapi",
]

autosummary_generate = True
autosummary_imported_members = False
automodapi_toctreedirnm = "code/api"
automodsumm_inherited_members = True

source_suffix = ".rst"
master_doc = "index"

project = "ICGE-Align"
copyright = "2026, The ICGE-Align Authors"
author = "The ICGE-Align Authors"

add_module_names = False

import icge_align

release = icge_align.__version__
version = re.match(r"^(\d+\.\d+)", release).expand(r"\1")

language = "en"
today_fmt = "%Y-%m-%d"
exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]
pygments_style = "sphinx"
todo_include_todos = True

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
}

# -- Options for HTML output ----------------------------------------------

html_theme = "alabaster"
html_theme_options = {
    "description": "Oracle-checked reasoning-guided image generation",
    "fixed_sidebar": True,
}
htmlhelp_basename = "ICGE-Aligndoc"

# -- Options for manual page output ---------------------------------------

man_pages = [(master_doc, "icge-align", "ICGE-Align Documentation", [author], 1)]

autodoc_member_order = "bysource"

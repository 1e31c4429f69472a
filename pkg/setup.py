from setuptools import setup


def _read(f):
    """
    Reads in the content of the file.
    :param f: the file to read
    :type f: str
    :return: the content
    :rtype: str
    """
    return open(f, 'rb').read()


setup(
    name="composite-gaussian-scenes",
    description="Library and command-line tools for reconstructing and editing dynamic driving scenes with composite Gaussian splatting.",
    long_description=(
        _read('DESCRIPTION.rst') + b'\n' +
        _read('CHANGES.rst')).decode('utf-8'),
    url="https://github.com/fracpete/composite-gaussian-scenes",
    classifiers=[
        'Development Status :: 4 - Beta',
        'License :: OSI Approved :: Apache Software License',
        'Topic :: Scientific/Engineering :: Image Processing',
        'Programming Language :: Python :: 3',
    ],
    license='Apache 2.0',
    package_dir={
        '': 'src'
    },
    packages=[
        "cgs",
        "cgs.api",
        "cgs.tools",
    ],
    version="0.0.1",
    author='Peter "fracpete" Reutemann',
    author_email='fracpete@gmail.com',
    python_requires=">=3.8",
    install_requires=[
        "wai.logging",
        "requests",
        "numpy",
        "scipy",
        "torch",
        "plyfile",
        "Pillow",
        "PyYAML",
    ],
    extras_require={
        "test": [
            "pytest",
            "hypothesis",
        ],
    },
    entry_points={
        "console_scripts": [
            "cgs-reconstruct=cgs.tools.reconstruct:sys_main",
            "cgs-render=cgs.tools.render_scene:sys_main",
            "cgs-edit=cgs.tools.edit_scene:sys_main",
            "cgs-eval=cgs.tools.evaluate:sys_main",
            "cgs-synth-fixture=cgs.tools.synth_fixture:sys_main",
            "cgs-ingest-asset=cgs.tools.ingest_asset:sys_main",
            "cgs-list-assets=cgs.tools.list_assets:sys_main",
        ]
    }
)

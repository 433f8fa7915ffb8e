import argparse
from sgquant.utils import writeCmds


def main(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument('dataDir', nargs='?', default=None,
                        help='Image corpus directory; omit to train on the synthetic corpus')
    parser.add_argument('--outDir', '-d', required=True)
    parser.add_argument('--cmdsFile', '-f', type=str, default='list-of-commands.txt')
    parser.add_argument('--modes', '-m', type=lambda v: v.split(','), default=['sgt_baseline', 'sgt_pact'],
                        help='Comma separated training modes e.g. sgt_baseline,sgt_pact')
    parser.add_argument('--seeds', '-s', type=lambda v: [int(s) for s in v.split(',')], default=[1, 2, 3],
                        help='Comma separated seeds e.g. 1,2,3')
    parser.add_argument('--cmdOptions', '-x', type=str, default="",
                        help='String of training options e.g. "--epochs 20 --bits 4"')
    args = parser.parse_args(argv)

    writeCmds(dataDir=args.dataDir,
              outDir=args.outDir,
              cmdsFile=args.cmdsFile,
              modes=args.modes,
              seeds=args.seeds,
              cmdOptions=args.cmdOptions)


if __name__ == '__main__':
    main()
